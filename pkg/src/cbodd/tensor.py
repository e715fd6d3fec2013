"""Dense float64 arrays with taped reverse-mode differentiation.

A ``DiffArray`` wraps a numpy array; every operation that produced it is
recorded so ``backward()`` on a scalar loss can push vector-Jacobian
products to all reachable gradient-requiring leaves.  Gradients accumulate
additively, both across multiple uses of a leaf inside one graph and
across repeated ``backward()`` calls.

Reductions run in numpy's default (deterministic) order and everything is
64-bit, so fixed seeds give bit-identical trajectories on one platform.
A recorded graph must stay on the logical thread that built it; the
arrays themselves are plain values and may be handed between threads.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from cbodd import backend
from cbodd.errors import DimensionError, NumericError, RankError

ArrayLike = "DiffArray | np.ndarray | float | int | Sequence"

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording (inference mode) inside the block."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class BackwardReport:
    """Outcome of a backward pass."""

    detached: bool
    visited: int


class DiffArray:
    """Value-semantic dense array participating in a recorded computation."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[DiffArray, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        """Reset the gradient buffer to zeros of the value shape."""
        self.grad = np.zeros_like(self.values)

    def detach(self) -> "DiffArray":
        return DiffArray(self.values.copy())

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{tag})"

    # -- graph ------------------------------------------------------------

    def backward(self) -> BackwardReport:
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar (rank 0).  A graph with no
        gradient-requiring ancestors is a no-op flagged as detached.
        """
        if self.values.ndim != 0:
            raise RankError(
                f"backward requires a rank-0 scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            return BackwardReport(detached=True, visited=0)

        order: list[DiffArray] = []
        seen: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): np.ones(())}
        for node in reversed(order):
            grad_out = pending.pop(id(node), None)
            if grad_out is None:
                continue
            if node._vjp is None:
                node.grad = grad_out if node.grad is None else node.grad + grad_out
                continue
            for parent, grad_in in zip(node._parents, node._vjp(grad_out)):
                if grad_in is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + grad_in
                else:
                    pending[key] = grad_in
        return BackwardReport(detached=False, visited=len(order))

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_diff(other), -1.0))

    def __rsub__(self, other):
        return add(as_diff(other), scale(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def as_diff(value) -> DiffArray:
    """Coerce a constant to a non-differentiable DiffArray."""
    return value if isinstance(value, DiffArray) else DiffArray(value)


def parameter(values, rng: np.random.Generator | None = None) -> DiffArray:
    """A leaf array that requires gradients."""
    return DiffArray(values, requires_grad=True)


def uniform_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> DiffArray:
    """Leaf initialised uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))."""
    bound = float(np.sqrt(1.0 / fan_in))
    return DiffArray(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _make(values: np.ndarray, parents: tuple[DiffArray, ...], vjp) -> DiffArray:
    out = DiffArray(values)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ops -------------------------------------------------------


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    values = a.values + b.values

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(values, (a, b), vjp)


def multiply(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    values = a.values * b.values

    def vjp(g):
        return (
            _unbroadcast(g * b.values, a.shape),
            _unbroadcast(g * a.values, b.shape),
        )

    return _make(values, (a, b), vjp)


def scale(a, factor: float) -> DiffArray:
    a = as_diff(a)
    factor = float(factor)
    values = a.values * factor

    def vjp(g):
        return (g * factor,)

    return _make(values, (a,), vjp)


def add_scalar(a, offset: float) -> DiffArray:
    a = as_diff(a)
    values = a.values + float(offset)

    def vjp(g):
        return (g,)

    return _make(values, (a,), vjp)


def relu(a) -> DiffArray:
    a = as_diff(a)
    mask = a.values > 0.0
    values = np.where(mask, a.values, 0.0)

    def vjp(g):
        return (g * mask,)

    return _make(values, (a,), vjp)


def sigmoid(a) -> DiffArray:
    """Elementwise logistic function; outputs lie strictly in (0, 1).

    Saturated values are nudged to the nearest representable neighbour of
    0 and 1 so the open-interval contract survives float64 rounding.
    """
    a = as_diff(a)
    x = a.values
    values = np.empty_like(x)
    pos = x >= 0
    values[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    values[~pos] = ex / (1.0 + ex)
    values = np.clip(values, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))

    def vjp(g):
        return (g * values * (1.0 - values),)

    return _make(values, (a,), vjp)


def log(a) -> DiffArray:
    a = as_diff(a)
    if np.any(a.values <= 0.0):
        raise NumericError("log requires strictly positive input")
    values = np.log(a.values)

    def vjp(g):
        return (g / a.values,)

    return _make(values, (a,), vjp)


def clamp_min(a, floor: float) -> DiffArray:
    """max(a, floor); gradient passes only where a exceeds the floor."""
    a = as_diff(a)
    floor = float(floor)
    mask = a.values > floor
    values = np.where(mask, a.values, floor)

    def vjp(g):
        return (g * mask,)

    return _make(values, (a,), vjp)


def power(a, exponent: float) -> DiffArray:
    a = as_diff(a)
    exponent = float(exponent)
    values = a.values**exponent

    def vjp(g):
        return (g * exponent * a.values ** (exponent - 1.0),)

    return _make(values, (a,), vjp)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape: tuple[int, ...]) -> DiffArray:
    a = as_diff(a)
    original = a.shape
    values = a.values.reshape(shape)

    def vjp(g):
        return (g.reshape(original),)

    return _make(values, (a,), vjp)


def transpose(a, axes: tuple[int, ...] | None = None) -> DiffArray:
    a = as_diff(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(int(i) for i in np.argsort(axes))
    values = a.values.transpose(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(values, (a,), vjp)


def roll(a, shifts: tuple[int, ...], axes: tuple[int, ...]) -> DiffArray:
    """Cyclic roll along ``axes``; the inverse roll is the exact VJP."""
    a = as_diff(a)
    values = np.roll(a.values, shifts, axis=axes)
    inverse = tuple(-s for s in shifts)

    def vjp(g):
        return (np.roll(g, inverse, axis=axes),)

    return _make(values, (a,), vjp)


def concat(arrays: Iterable, axis: int = -1) -> DiffArray:
    parts = [as_diff(a) for a in arrays]
    values = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(values, tuple(parts), vjp)


# -- reductions --------------------------------------------------------------


def mean(a, axis: int | None = None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    values = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, 1.0 / count) * g,)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(values, (a,), vjp)


def total_sum(a, axis: int | None = None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(values, (a,), vjp)


def frobenius_sq(a) -> DiffArray:
    """Sum of squared entries, reduced to a rank-0 scalar."""
    a = as_diff(a)
    values = np.asarray((a.values**2).sum())

    def vjp(g):
        return (2.0 * a.values * g,)

    return _make(values, (a,), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> DiffArray:
    """Matrix product.

    Supports plain rank-2 operands, stacked operands with identical leading
    dimensions, and a stacked ``a`` against a rank-2 ``b``.
    """
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise RankError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"matmul stacked extents differ: {a.shape} x {b.shape}"
        )
    values = a.values @ b.values

    def vjp(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        if gb.ndim > b.ndim:  # stacked a against plain b
            gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
        return ga, gb

    return _make(values, (a, b), vjp)


def softmax_rows(a) -> DiffArray:
    """Row-stabilised softmax along the last axis.

    Each row of the result is non-negative and sums to 1 within 1e-12.
    """
    a = as_diff(a)
    if not np.isfinite(a.values).all():
        raise NumericError("softmax_rows requires finite input")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    values = ex / ex.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * values).sum(axis=-1, keepdims=True)
        return (values * (g - dot),)

    return _make(values, (a,), vjp)


# -- spatial ops -------------------------------------------------------------


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> DiffArray:
    """Strided 2-D cross-correlation of (B,Ci,H,W) with kernels (Co,Ci,kh,kw).

    The heavy lifting is delegated to the active kernel backend.
    """
    x, w = as_diff(x), as_diff(w)
    if x.ndim != 4 or w.ndim != 4:
        raise RankError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}"
        )
    kh, kw = w.shape[2], w.shape[3]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise DimensionError(
            f"conv2d kernel {w.shape} exceeds padded input {x.shape} (padding={padding})"
        )
    if padding:
        xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = np.ascontiguousarray(x.values)
    wv = np.ascontiguousarray(w.values)
    values = backend.conv2d_forward(xp, wv, stride)
    hp, wp = xp.shape[2], xp.shape[3]

    def vjp(g):
        g = np.ascontiguousarray(g)
        gxp = backend.conv2d_grad_input(g, wv, stride, hp, wp)
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = gxp
        gw = backend.conv2d_grad_weight(g, xp, kh, kw, stride)
        return np.ascontiguousarray(gx), gw

    out = _make(values, (x, w), vjp)
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1)))
    return out


def _pool_bounds(extent: int, bins: int) -> list[tuple[int, int]]:
    """Floor-based adaptive window bounds partitioning [0, extent)."""
    return [(i * extent // bins, (i + 1) * extent // bins) for i in range(bins)]


def adaptive_avg_pool(x, k_h: int, k_w: int) -> DiffArray:
    """Adaptive average pooling of (B,C,H,W) onto a k_h x k_w grid.

    Window (i, j) spans rows [floor(i*H/k_h), floor((i+1)*H/k_h)) and the
    analogous columns, so the windows partition the map exactly.
    """
    x = as_diff(x)
    if x.ndim != 4:
        raise RankError(f"adaptive_avg_pool expects rank-4 input, got {x.shape}")
    batch, channels, height, width = x.shape
    if k_h > height or k_w > width:
        raise DimensionError(
            f"pool grid ({k_h}, {k_w}) exceeds map extent ({height}, {width})"
        )
    rows = _pool_bounds(height, k_h)
    cols = _pool_bounds(width, k_w)
    values = np.empty((batch, channels, k_h, k_w))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            values[:, :, i, j] = x.values[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def vjp(g):
        gx = np.zeros(x.shape)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i : i + 1, j : j + 1] / area
        return (gx,)

    return _make(values, (x,), vjp)


# -- verification helpers ----------------------------------------------------


def finite_difference_grad(
    fn: Callable[[Sequence[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    step: float = 1e-4,
) -> list[np.ndarray]:
    """Central-difference gradients of ``fn`` w.r.t. each array in ``arrays``.

    Independent of the recorded-graph machinery; used to validate it.
    """
    grads = []
    work = [np.array(a, dtype=np.float64) for a in arrays]
    for idx, arr in enumerate(work):
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for pos in range(flat.size):
            original = flat[pos]
            flat[pos] = original + step
            hi = fn(work)
            flat[pos] = original - step
            lo = fn(work)
            flat[pos] = original
            gflat[pos] = (hi - lo) / (2.0 * step)
        grads.append(grad)
    return grads


def max_relative_error(
    analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], guard: float = 1e-8
) -> float:
    """max |a - n| / max(|a|, |n|, guard) over all entries of all arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), guard)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
