"""Dense N-d tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous numpy buffer (float32 by default, float64 for
gradient checking). Differentiable operations record a node holding the
input references and a backward rule; `backward(loss)` replays the nodes in
exact reverse creation order, summing gradients over all paths. Forward
outputs are checked for NaN/Inf and non-finite values raise NumericsError
at the op that produced them.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericsError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_node_counter = itertools.count()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (eval passes, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    """One recorded primitive application: inputs plus a backward rule.

    `backward_fn(grad_out) -> tuple of grads aligned with inputs` (entries may
    be None for non-differentiable arguments). `order` is a globally
    increasing creation index; reverse traversal processes every consumer of
    a tensor before the tensor itself, which is what makes plain `+=`
    accumulation correct for shared inputs.
    """

    __slots__ = ("inputs", "backward_fn", "order")

    def __init__(self, inputs, backward_fn):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.order = next(_node_counter)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.ascontiguousarray(data, dtype=dtype)
        if any(n <= 0 for n in arr.shape):
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # Leaves created with requires_grad get an eager zero grad buffer so an
        # unreachable parameter reports zero, not absence.
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._node = None

    @classmethod
    def _from_op(cls, data, requires_grad, node):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._node = node
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absolute(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return permute_axes(self, perm)

    def backward(self):
        backward(self)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Coerce scalars/arrays to a non-grad Tensor, matching `like`'s dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def apply_op(out_data: np.ndarray, inputs, backward_fn, check: bool = True) -> Tensor:
    """Create the output of a differentiable primitive and record its node.

    `backward_fn(grad_out)` must return per-input gradients (or None). Pure
    data-movement ops may pass check=False since their inputs were already
    validated.
    """
    if check and not np.all(np.isfinite(out_data)):
        raise NumericsError("non-finite values produced by a forward op")
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    node = TapeNode(tuple(inputs), backward_fn) if requires else None
    return Tensor._from_op(out_data, requires, node)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    return apply_op(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,), check=False)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return apply_op(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    return apply_op(out_data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out_data),)

    return apply_op(out_data, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0, matching relu's convention
    def bwd(g):
        return (g * np.sign(a.data),)

    return apply_op(np.abs(a.data), (a,), bwd, check=False)


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    mask = a.data > floor

    def bwd(g):
        return (g * mask,)

    return apply_op(np.maximum(a.data, floor), (a,), bwd, check=False)


# -- reductions ---------------------------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)

    return apply_op(np.asarray(out_data), (a,), bwd, check=False)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)
    inv = 1.0 / count

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, a.shape).astype(a.data.dtype, copy=False),)

    return apply_op(np.asarray(out_data), (a,), bwd, check=False)


# -- structural ops -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:  # non-broadcastable batch extents
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}") from e

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op(out_data, (a, b), bwd)


def permute_axes(a: Tensor, perm) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(a.ndim)):
        raise ValueError(f"perm {perm} is not a permutation of 0..{a.ndim - 1}")
    inverse = np.argsort(perm)
    # materialize a contiguous copy: storage stays row-major by construction
    out_data = np.ascontiguousarray(np.transpose(a.data, perm))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return apply_op(out_data, (a,), bwd, check=False)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return apply_op(out_data, (a,), bwd, check=False)


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero parts")
    rank = parts[0].ndim
    axis = axis % rank
    for p in parts[1:]:
        if p.ndim != rank:
            raise DimensionError(
                f"concat rank mismatch: {parts[0].shape} vs {p.shape}"
            )
        for d in range(rank):
            if d != axis and p.shape[d] != parts[0].shape[d]:
                raise DimensionError(
                    f"concat extents differ off axis {axis}: {parts[0].shape} vs {p.shape}"
                )
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return apply_op(out_data, tuple(parts), bwd, check=False)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    axis = axis % a.ndim
    index = tuple(slice(None) if d != axis else slice(start, stop) for d in range(a.ndim))
    out_data = np.ascontiguousarray(a.data[index])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return apply_op(out_data, (a,), bwd, check=False)


# -- backward pass ------------------------------------------------------------


def backward(loss: Tensor):
    """Fill `.grad` of every reachable requires_grad tensor.

    Repeated calls without zeroing accumulate (gradients are linear, so two
    passes equal one pass over the summed losses).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing was recorded")

    # Collect reachable tensors; leaves sort last (order -1).
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        if t._node is not None:
            for inp in t._node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append(inp)

    ordered = sorted(
        seen.values(), key=lambda t: t._node.order if t._node is not None else -1, reverse=True
    )

    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in ordered:
        g = flow.pop(id(t), None)
        if g is None:
            continue
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad += g
        node = t._node
        if node is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            acc = flow.get(id(inp))
            flow[id(inp)] = gi if acc is None else acc + gi


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    passed: bool
    worst_index: tuple | None = None
    message: str = ""

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        extra = f" ({self.message})" if self.message else ""
        return f"{self.name}: max rel err {self.max_rel_err:.3e} over {self.n_checked} entries -> {status}{extra}"


def grad_check(
    f,
    inputs,
    tol: float = 1e-4,
    step: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> list[GradCheckResult]:
    """Compare analytic gradients of scalar `f(*inputs)` against central finite
    differences.

    Inputs must be float64 tensors with requires_grad. The relative error is
    |a - n| / max(1, |a|, |n|), floored at scale 1 so near-zero gradients do
    not amplify finite-difference noise. With `sample`, at most that many
    entries per input are probed (seeded choice) — full check otherwise.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require grad")

    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    backward(out)
    analytic = [t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    results = []
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            idxs = rng.choice(n, size=sample, replace=False)
        else:
            idxs = np.arange(n)
        max_err = 0.0
        worst = None
        message = ""
        ok = True
        for i in idxs:
            saved = flat[i]
            try:
                with no_grad():
                    flat[i] = saved + step
                    f_plus = f(*inputs).item()
                    flat[i] = saved - step
                    f_minus = f(*inputs).item()
            except NumericsError as e:
                ok = False
                message = f"non-finite during probe at flat index {i}: {e}"
                flat[i] = saved
                break
            finally:
                flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = ana.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > max_err:
                max_err = err
                worst = np.unravel_index(i, t.shape)
        results.append(
            GradCheckResult(
                name=f"input{len(results)}",
                max_rel_err=max_err,
                n_checked=len(idxs),
                passed=ok and max_err <= tol,
                worst_index=worst,
                message=message,
            )
        )
    return results
