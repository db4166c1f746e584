"""Successive permuted transformer: three per-view stages over 2D slices.

Each part slices the volume along one axis (0 sagittal, 1 axial, 2 coronal),
tokenizes every slice into non-overlapping patches, runs transformer encoder
layers over the tokens, merges 2x2 neighboring tokens, and projects the merged
tokens back to a voxel grid at half the in-slice resolution. The sliced axis
is untouched, so after the three parts every spatial axis has been halved by
exactly the two parts that did not slice along it: a net 1/4 per axis.

Patch sizes adapt per part: a part uses the largest power-of-two patch edge
<= the requested one for which both in-slice extents split into an even token
grid (merging needs even grid sides). For 96x112x96 at patch 8 this resolves
to parts (8, 8, 4); at patch 2 on the second stage to (2, 2, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from .layers import EncoderLayerParams, linear, layer_norm, transformer_encoder_layer
from .tensor import Tensor, permute_axes, reshape

VIEW_NAMES = {0: "sagittal", 1: "axial", 2: "coronal"}

# permutations taking [B,C,D,H,W] to [B,S,C,H',W'] for each sliced axis
_SLICE_PERM = {0: (0, 2, 1, 3, 4), 1: (0, 3, 1, 2, 4), 2: (0, 4, 1, 2, 3)}
_UNSLICE_PERM = {0: (0, 2, 1, 3, 4), 1: (0, 2, 3, 1, 4), 2: (0, 2, 3, 4, 1)}


@dataclass
class SptPartConfig:
    axis: int  # 0 | 1 | 2, the view this part slices along
    patch: int  # resolved patch edge for this part
    embed_dim: int
    depth: int
    heads: int
    in_channels: int
    out_channels: int
    slice_hw: tuple[int, int]  # in-slice extents before patching
    grid: tuple[int, int]  # token grid (slice_hw / patch), both even

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.in_channels


@dataclass
class SptConfig:
    parts: tuple[SptPartConfig, SptPartConfig, SptPartConfig]
    input_channels: int

    @property
    def out_channels(self) -> int:
        return self.parts[-1].out_channels


@dataclass
class SptPartParams:
    proj_w: Tensor  # token_dim -> d
    proj_b: Tensor
    pos: Tensor  # [n_tokens, d], shared across all slices of the view
    encoder: list[EncoderLayerParams]
    merge_ln_gamma: Tensor  # over 4d
    merge_ln_beta: Tensor
    merge_w: Tensor  # 4d -> 2d
    merge_b: Tensor
    depatch_w: Tensor  # 2d -> p^2 * out_channels
    depatch_b: Tensor


def resolve_patch(extents: tuple[int, int], requested: int) -> int:
    """Largest power-of-two patch edge <= requested giving an even token grid."""
    p = requested
    while p >= 1:
        if all(e % (2 * p) == 0 for e in extents):
            return p
        p //= 2
    raise ConfigError(
        f"in-slice extents {extents} admit no patch size <= {requested} "
        f"with an even token grid (extents must be divisible by 2*patch)"
    )


def plan_spt(
    shape: tuple[int, int, int],
    in_channels: int,
    patch: int,
    embed_dim: int,
    depth: int,
    heads: int,
    out_channels: int,
) -> SptConfig:
    """Lay out the three parts for a given input, resolving per-part patch sizes.

    `out_channels` applies to every part (each part re-encodes the volume);
    the last part's value is the stage's output channel count.
    """
    if embed_dim % heads != 0:
        raise ConfigError(f"embed dim {embed_dim} not divisible by {heads} heads")
    dims = list(shape)
    channels = in_channels
    parts = []
    for axis in (0, 1, 2):
        inslice = tuple(dims[a] for a in (0, 1, 2) if a != axis)
        try:
            p = resolve_patch(inslice, patch)
        except ConfigError as e:
            raise ConfigError(f"part {axis} ({VIEW_NAMES[axis]}): {e}") from e
        grid = (inslice[0] // p, inslice[1] // p)
        parts.append(
            SptPartConfig(
                axis=axis,
                patch=p,
                embed_dim=embed_dim,
                depth=depth,
                heads=heads,
                in_channels=channels,
                out_channels=out_channels,
                slice_hw=inslice,
                grid=grid,
            )
        )
        for a in (0, 1, 2):
            if a != axis:
                dims[a] //= 2
        channels = out_channels
    assert tuple(dims) == tuple(s // 4 for s in shape)
    return SptConfig(parts=tuple(parts), input_channels=in_channels)


# -- data movement ---------------------------------------------------------------


def slice_view(x: Tensor, axis: int) -> Tensor:
    """[B,C,D,H,W] -> [B*S, C, H', W'] where S is the extent along `axis`."""
    if x.ndim != 5:
        raise DimensionError(f"slice_view expects rank 5, got {x.shape}")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    moved = permute_axes(x, _SLICE_PERM[axis])
    b, s, c, h, w = moved.shape
    return reshape(moved, (b * s, c, h, w))


def unslice_view(slices: Tensor, axis: int, batch: int) -> Tensor:
    """Inverse of slice_view: [B*S, C, H', W'] -> [B,C,D,H,W]."""
    if slices.ndim != 4:
        raise DimensionError(f"unslice_view expects rank 4, got {slices.shape}")
    n, c, h, w = slices.shape
    if n % batch:
        raise DimensionError(f"{n} slices do not divide into batch {batch}")
    stacked = reshape(slices, (batch, n // batch, c, h, w))
    return permute_axes(stacked, _UNSLICE_PERM[axis])


def patch_split(slices: Tensor, patch: int) -> Tensor:
    """[N,C,H,W] -> [N, (H/p)(W/p), p*p*C]; pure reshape, row-major patch order."""
    if slices.ndim != 4:
        raise DimensionError(f"patch_split expects rank 4, got {slices.shape}")
    n, c, h, w = slices.shape
    if h % patch:
        raise DimensionError(f"patch {patch} does not divide slice height {h}")
    if w % patch:
        raise DimensionError(f"patch {patch} does not divide slice width {w}")
    gh, gw = h // patch, w // patch
    t = reshape(slices, (n, c, gh, patch, gw, patch))
    t = permute_axes(t, (0, 2, 4, 3, 5, 1))  # [N, gh, gw, p, p, C]
    return reshape(t, (n, gh * gw, patch * patch * c))


def patch_join(tokens: Tensor, grid: tuple[int, int], patch: int, channels: int) -> Tensor:
    """Inverse of patch_split: [N, gh*gw, p*p*C] -> [N, C, H, W]."""
    n = tokens.shape[0]
    gh, gw = grid
    t = reshape(tokens, (n, gh, gw, patch, patch, channels))
    t = permute_axes(t, (0, 5, 1, 3, 2, 4))  # [N, C, gh, p, gw, p]
    return reshape(t, (n, channels, gh * patch, gw * patch))


def embed_tokens(tokens: Tensor, proj_w: Tensor, proj_b: Tensor, pos: Tensor) -> Tensor:
    """Linear projection plus a learned positional table shared across slices."""
    if tokens.shape[-2] != pos.shape[0]:
        raise DimensionError(
            f"positional table covers {pos.shape[0]} tokens, input has {tokens.shape[-2]}"
        )
    return linear(tokens, proj_w, proj_b) + pos


def patch_merge(
    tokens: Tensor,
    grid: tuple[int, int],
    ln_gamma: Tensor,
    ln_beta: Tensor,
    w: Tensor,
    b: Tensor,
) -> Tensor:
    """Concatenate each 2x2 token neighborhood, layer-norm, project 4d -> 2d."""
    gh, gw = grid
    if gh % 2 or gw % 2:
        raise DimensionError(f"patch_merge needs an even grid, got {grid}")
    n, count, d = tokens.shape
    if count != gh * gw:
        raise DimensionError(f"{count} tokens do not fill grid {grid}")
    t = reshape(tokens, (n, gh // 2, 2, gw // 2, 2, d))
    t = permute_axes(t, (0, 1, 3, 2, 4, 5))  # [N, gh/2, gw/2, 2, 2, d]
    t = reshape(t, (n, (gh // 2) * (gw // 2), 4 * d))
    return linear(layer_norm(t, ln_gamma, ln_beta), w, b)


def de_patchify(
    merged: Tensor, grid_half: tuple[int, int], patch: int, out_channels: int, w: Tensor, b: Tensor
) -> Tensor:
    """Project each merged token to a p x p block of the half-resolution slice."""
    gh2, gw2 = grid_half
    n, count, _ = merged.shape
    if count != gh2 * gw2:
        raise DimensionError(f"{count} merged tokens do not fill grid {grid_half}")
    if w.shape[1] != patch * patch * out_channels:
        raise DimensionError(
            f"de-patchify projection maps to {w.shape[1]}, need {patch * patch * out_channels}"
        )
    blocks = linear(merged, w, b)  # [N, gh2*gw2, p*p*C_out]
    return patch_join(blocks, grid_half, patch, out_channels)


# -- forward ----------------------------------------------------------------------


def spt_part_forward(x: Tensor, cfg: SptPartConfig, params: SptPartParams) -> Tensor:
    """One view: slice, tokenize, encode, merge, rebuild at half in-slice scale."""
    batch = x.shape[0]
    if x.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"part {cfg.axis} expects {cfg.in_channels} channels, got {x.shape[1]}"
        )
    if tuple(x.shape[2 + a] for a in (0, 1, 2) if a != cfg.axis) != cfg.slice_hw:
        raise DimensionError(
            f"part {cfg.axis} planned for in-slice {cfg.slice_hw}, got volume {x.shape}"
        )
    slices = slice_view(x, cfg.axis)
    tokens = patch_split(slices, cfg.patch)
    tokens = embed_tokens(tokens, params.proj_w, params.proj_b, params.pos)
    for layer in params.encoder:
        tokens = transformer_encoder_layer(tokens, layer)
    merged = patch_merge(
        tokens, cfg.grid, params.merge_ln_gamma, params.merge_ln_beta, params.merge_w, params.merge_b
    )
    half = (cfg.grid[0] // 2, cfg.grid[1] // 2)
    rebuilt = de_patchify(merged, half, cfg.patch, cfg.out_channels, params.depatch_w, params.depatch_b)
    return unslice_view(rebuilt, cfg.axis, batch)


def spt_forward(x: Tensor, cfg: SptConfig, params: list[SptPartParams]) -> Tensor:
    """Apply the three parts in view order 0, 1, 2; each axis ends at 1/4 extent."""
    for part_cfg, part_params in zip(cfg.parts, params):
        x = spt_part_forward(x, part_cfg, part_params)
    return x
