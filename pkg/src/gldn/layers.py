"""Neural-network layers for both streams: 3D conv stack and transformer parts.

Convolution and pooling are fused primitives with hand-written backward rules
(the hot path); normalization, attention and the encoder layer are composed
from tensor primitives so their gradients come for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.special import erf

from .errors import DimensionError
from .tensor import Tensor, apply_op, matmul, permute_axes, reshape, sqrt as tsqrt

SQRT2 = float(np.sqrt(2.0))
INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


# -- parameter containers ------------------------------------------------------


@dataclass
class Conv3dParams:
    """3x3x3 kernel, padding 1, stride 1: spatial extents are preserved."""

    weight: Tensor  # [C_out, C_in, 3, 3, 3]
    bias: Tensor  # [C_out]


@dataclass
class BatchNorm3dState:
    gamma: Tensor  # [C]
    beta: Tensor  # [C]
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = False


@dataclass
class AttentionParams:
    wq: Tensor  # [d, d]
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor  # [d]
    bk: Tensor
    bv: Tensor
    bo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads != 0:
            raise DimensionError(f"embed dim {d} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.heads


@dataclass
class EncoderLayerParams:
    """Pre-norm residual block: x + MSA(LN(x)), then x + FFN(LN(x))."""

    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttentionParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ffn_w1: Tensor  # [d, 4d]
    ffn_b1: Tensor
    ffn_w2: Tensor  # [4d, d]
    ffn_b2: Tensor


# -- convolutional stream ------------------------------------------------------


def conv3d(x: Tensor, p: Conv3dParams) -> Tensor:
    """Cross-correlation with zero padding 1 and stride 1.

    Implemented as 27 shifted tensordot accumulations so the contraction runs
    through BLAS instead of python loops over voxels.
    """
    if x.ndim != 5:
        raise DimensionError(f"conv3d expects [B,C,D,H,W], got {x.shape}")
    B, c_in, D, H, W = x.shape
    c_out, c_in_w, kd, kh, kw = p.weight.shape
    if (kd, kh, kw) != (3, 3, 3):
        raise DimensionError(f"conv3d kernel must be 3x3x3, got {(kd, kh, kw)}")
    if c_in != c_in_w:
        raise DimensionError(
            f"conv3d channel mismatch: input has {c_in}, weight expects {c_in_w}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    wd = p.weight.data
    acc = np.zeros((c_out, B, D, H, W), dtype=x.data.dtype)
    for i, j, k in product(range(3), range(3), range(3)):
        view = xp[:, :, i : i + D, j : j + H, k : k + W]
        acc += np.tensordot(wd[:, :, i, j, k], view, axes=(1, 1))
    out_data = np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))
    out_data += p.bias.data.reshape(1, -1, 1, 1, 1)

    def bwd(g):
        dw = np.zeros_like(wd)
        dxp = np.zeros_like(xp)
        for i, j, k in product(range(3), range(3), range(3)):
            view = xp[:, :, i : i + D, j : j + H, k : k + W]
            dw[:, :, i, j, k] = np.tensordot(g, view, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            spread = np.tensordot(wd[:, :, i, j, k], g, axes=(0, 1))  # [C_in,B,D,H,W]
            dxp[:, :, i : i + D, j : j + H, k : k + W] += spread.transpose(1, 0, 2, 3, 4)
        dx = np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1, 1:-1])
        db = g.sum(axis=(0, 2, 3, 4))
        return dx, dw, db

    return apply_op(out_data, (x, p.weight, p.bias), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 defined as 0

    def bwd(g):
        return (g * mask,)

    return apply_op(x.data * mask, (x,), bwd, check=False)


def maxpool3d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping window maximum; gradient goes to each window's first argmax."""
    if x.ndim != 5:
        raise DimensionError(f"maxpool3d expects [B,C,D,H,W], got {x.shape}")
    B, C, D, H, W = x.shape
    if D % size or H % size or W % size:
        raise DimensionError(
            f"maxpool3d needs extents divisible by {size}, got {(D, H, W)}"
        )
    d2, h2, w2 = D // size, H // size, W // size
    win = size**3
    cube = x.data.reshape(B, C, d2, size, h2, size, w2, size)
    flat = np.ascontiguousarray(cube.transpose(0, 1, 2, 4, 6, 3, 5, 7)).reshape(
        B, C, d2, h2, w2, win
    )
    arg = flat.argmax(axis=-1)  # np.argmax keeps the first index on ties
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dcube = dflat.reshape(B, C, d2, h2, w2, size, size, size).transpose(
            0, 1, 2, 5, 3, 6, 4, 7
        )
        return (np.ascontiguousarray(dcube).reshape(B, C, D, H, W),)

    return apply_op(np.ascontiguousarray(out_data), (x,), bwd, check=False)


def batchnorm3d(x: Tensor, s: BatchNorm3dState) -> Tensor:
    """Per-channel normalization over batch and spatial dims.

    Train mode uses batch statistics (biased variance) and updates running
    stats with the unbiased variance; eval mode normalizes with the stored
    running stats. Affine transform applied last.
    """
    if x.ndim != 5:
        raise DimensionError(f"batchnorm3d expects [B,C,D,H,W], got {x.shape}")
    B, C, D, H, W = x.shape
    if C != s.gamma.shape[0]:
        raise DimensionError(f"batchnorm3d channel mismatch: {C} vs {s.gamma.shape[0]}")
    axes = (0, 2, 3, 4)
    gamma = reshape(s.gamma, (1, C, 1, 1, 1))
    beta = reshape(s.beta, (1, C, 1, 1, 1))
    if s.training:
        n = B * D * H * W
        if n < 2:
            raise ValueError("batchnorm3d train mode needs >= 2 elements per channel")
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        xhat = centered / tsqrt(var + s.eps)
        # detached running-stat update (single writer: the training loop)
        batch_mean = mu.data.reshape(C)
        batch_var = var.data.reshape(C) * (n / (n - 1))
        s.running_mean += s.momentum * (batch_mean - s.running_mean)
        s.running_var += s.momentum * (batch_var - s.running_var)
    else:
        rm = Tensor(s.running_mean.reshape(1, C, 1, 1, 1), dtype=x.data.dtype)
        rv = Tensor(s.running_var.reshape(1, C, 1, 1, 1), dtype=x.data.dtype)
        xhat = (x - rm) / tsqrt(rv + s.eps)
    return xhat * gamma + beta


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x [*, in] @ w [in, out] + b [out]; leading axes ride along."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear mismatch: {x.shape} x {w.shape}")
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    out = matmul(x, w) + b
    if squeeze:
        out = reshape(out, (out.shape[-1],))
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / tsqrt(var + eps) * gamma + beta


def softmax(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis; rows sum to 1."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return apply_op(y, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data / SQRT2))
    out_data = x.data * cdf

    def bwd(g):
        pdf = INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return apply_op(out_data, (x,), bwd)


def _swap_last_two(t: Tensor) -> Tensor:
    perm = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return permute_axes(t, perm)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(
            f"attention operands must agree, got {q.shape}, {k.shape}, {v.shape}"
        )
    if q.ndim < 2:
        raise DimensionError(f"attention needs [*, n, d_k], got {q.shape}")
    d_k = q.shape[-1]
    scores = matmul(q, _swap_last_two(k)) * (1.0 / np.sqrt(d_k))
    return matmul(softmax(scores), v)


def multi_head_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Project to q/k/v, attend per head, concatenate heads, project out."""
    if x.ndim < 2:
        raise DimensionError(f"multi_head_attention needs [*, n, d], got {x.shape}")
    n, d = x.shape[-2], x.shape[-1]
    if d != p.wq.shape[0]:
        raise DimensionError(f"token dim {d} does not match projections {p.wq.shape}")
    h, dk = p.heads, p.head_dim
    lead = x.shape[:-2]

    def split_heads(t):
        t = reshape(t, lead + (n, h, dk))
        r = t.ndim
        perm = tuple(range(r - 3)) + (r - 2, r - 3, r - 1)  # [..., h, n, dk]
        return permute_axes(t, perm)

    q = split_heads(linear(x, p.wq, p.bq))
    k = split_heads(linear(x, p.wk, p.bk))
    v = split_heads(linear(x, p.wv, p.bv))
    att = scaled_dot_attention(q, k, v)
    r = att.ndim
    att = permute_axes(att, tuple(range(r - 3)) + (r - 2, r - 3, r - 1))  # [..., n, h, dk]
    merged = reshape(att, lead + (n, d))
    return linear(merged, p.wo, p.bo)


def transformer_encoder_layer(x: Tensor, p: EncoderLayerParams) -> Tensor:
    x = x + multi_head_attention(layer_norm(x, p.ln1_gamma, p.ln1_beta), p.attn)
    h = layer_norm(x, p.ln2_gamma, p.ln2_beta)
    h = linear(gelu(linear(h, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2)
    return x + h


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise DimensionError(f"global_avg_pool expects [B,C,D,H,W], got {x.shape}")
    return x.mean(axis=(2, 3, 4))
