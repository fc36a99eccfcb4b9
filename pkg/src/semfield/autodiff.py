"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A ``Tensor`` wraps an ndarray plus the closures needed to push gradients
back to its parents. The graph ("tape") is implicit: every operation whose
inputs require gradients records a backward closure on its output, and
``Tensor.backward`` replays them in reverse topological order. Graphs are
rebuilt from scratch on every forward pass, so there is no stale state to
manage between training iterations.

All arithmetic is float64 and every op output is checked for NaN/Inf.
Reductions use numpy's fixed left-to-right pairwise order, which keeps
repeated runs bit-identical on the same machine.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(ValueError):
    """Base class for tape construction/replay failures."""


class ShapeError(AutodiffError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(AutodiffError):
    """A forward or backward pass produced NaN or Inf."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        raise TypeError("expected raw array-like, got Tensor")
    return np.asarray(value, dtype=np.float64)


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``grad`` accumulates the gradient of the most recent ``backward`` call.
    Leaf tensors created with ``requires_grad=True`` (and ``Parameter``
    values in :mod:`semfield.nn`) are the only nodes that keep gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _check_finite(_as_array(data), "tensor")
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- construction helper used by every op -----------------------------

    @staticmethod
    def _from_op(
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward_fn: Callable[[np.ndarray], None],
        op: str,
    ) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = _check_finite(data, op)
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Run the reverse pass seeding ``d(out)/d(out)`` with ``seed``.

        A scalar output defaults to seed 1. A non-scalar output requires an
        explicit seed of exactly the output shape.
        """
        if not self.requires_grad:
            raise AutodiffError("backward called on a tensor without a recorded tape")
        if seed is None:
            if self.data.ndim != 0:
                raise ShapeError("non-scalar backward requires an explicit seed")
            seed_arr = np.ones((), dtype=np.float64)
        else:
            seed_arr = _as_array(seed)
            if seed_arr.shape != self.data.shape:
                raise ShapeError(
                    f"seed shape {seed_arr.shape} != output shape {self.data.shape}"
                )

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(seed_arr)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                _check_finite(node.grad, "backward")
                node._backward_fn(node.grad)
                # interior grads are not needed again; free them eagerly
                if node is not self and node._parents:
                    node.grad = None

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other.reciprocal())
        return mul(self, 1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return mul(self.reciprocal(), other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reciprocal(self) -> "Tensor":
        inv = 1.0 / self.data

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(-grad * inv * inv)

        return Tensor._from_op(inv, (self,), backward_fn, "reciprocal")

    # -- shaping --------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.data.shape
        out = self.data.reshape(shape)

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(grad.reshape(original))

        return Tensor._from_op(out, (self,), backward_fn, "reshape")

    def tile_leading(self, count: int) -> "Tensor":
        """Repeat the tensor along a new leading axis; backward sums it out."""
        out = np.broadcast_to(self.data[None], (count,) + self.data.shape).copy()

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(grad.sum(axis=0))

        return Tensor._from_op(out, (self,), backward_fn, "tile_leading")

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def backward_fn(grad: np.ndarray) -> None:
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))

        return Tensor._from_op(np.asarray(out), (self,), backward_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def cumsum(self, axis: int) -> "Tensor":
        out = np.cumsum(self.data, axis=axis)

        def backward_fn(grad: np.ndarray) -> None:
            rev = np.flip(np.cumsum(np.flip(grad, axis), axis=axis), axis)
            self._accumulate(rev)

        return Tensor._from_op(out, (self,), backward_fn, "cumsum")

    # -- nonlinearities -----------------------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0.0
        out = np.where(mask, self.data, 0.0)

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(grad * mask)

        return Tensor._from_op(out, (self,), backward_fn, "relu")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(grad * out)

        return Tensor._from_op(out, (self,), backward_fn, "exp")

    def log(self) -> "Tensor":
        out = np.log(self.data)
        inv = 1.0 / self.data

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(grad * inv)

        return Tensor._from_op(out, (self,), backward_fn, "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(grad * (1.0 - out * out))

        return Tensor._from_op(out, (self,), backward_fn, "tanh")

    def sigmoid(self) -> "Tensor":
        out = _stable_sigmoid(self.data)

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(grad * out * (1.0 - out))

        return Tensor._from_op(out, (self,), backward_fn, "sigmoid")

    def softplus(self) -> "Tensor":
        out = np.logaddexp(0.0, self.data)
        sig = _stable_sigmoid(self.data)

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(grad * sig)

        return Tensor._from_op(out, (self,), backward_fn, "softplus")

    def clamp(self, lo: float, hi: float) -> "Tensor":
        out = np.clip(self.data, lo, hi)
        mask = (self.data >= lo) & (self.data <= hi)

        def backward_fn(grad: np.ndarray) -> None:
            self._accumulate(grad * mask)

        return Tensor._from_op(out, (self,), backward_fn, "clamp")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- binary ops --------------------------------------------------------------


def _coerce(other) -> np.ndarray | Tensor:
    return other if isinstance(other, Tensor) else _as_array(other)


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if isinstance(b, Tensor):
        out = a.data + b.data

        def backward_fn(grad: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad, b.data.shape))

        return Tensor._from_op(out, (a, b), backward_fn, "add")

    const = b
    out = a.data + const

    def backward_const(grad: np.ndarray) -> None:
        a._accumulate(_unbroadcast(grad, a.data.shape))

    return Tensor._from_op(out, (a,), backward_const, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if isinstance(b, Tensor):
        out = a.data * b.data

        def backward_fn(grad: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(_unbroadcast(grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(grad * a.data, b.data.shape))

        return Tensor._from_op(out, (a, b), backward_fn, "mul")

    const = b
    out = a.data * const

    def backward_const(grad: np.ndarray) -> None:
        a._accumulate(_unbroadcast(grad * const, a.data.shape))

    return Tensor._from_op(out, (a,), backward_const, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    deriv = exponent * a.data ** (exponent - 1.0)

    def backward_fn(grad: np.ndarray) -> None:
        a._accumulate(grad * deriv)

    return Tensor._from_op(out, (a,), backward_fn, "power")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(N, K) @ (K, M)``; the only contraction the pipeline needs."""
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward_fn(grad: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ grad)

    return Tensor._from_op(out, (a, b), backward_fn, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(grad: np.ndarray) -> None:
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * grad.ndim
                index[axis] = slice(start, stop)
                t._accumulate(grad[tuple(index)])

    return Tensor._from_op(out, tuple(tensors), backward_fn, "concat")


def gather_rows(source: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    rows = np.asarray(rows, dtype=np.int64)
    if source.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D source")
    out = source.data[rows]
    n_rows = source.data.shape[0]

    def backward_fn(grad: np.ndarray) -> None:
        acc = np.empty((n_rows, grad.shape[1]), dtype=np.float64)
        for c in range(grad.shape[1]):
            acc[:, c] = np.bincount(rows, weights=grad[:, c], minlength=n_rows)
        source._accumulate(acc)

    return Tensor._from_op(out, (source,), backward_fn, "gather_rows")


def scatter_rows(values: Tensor, rows: np.ndarray, num_rows: int) -> Tensor:
    """Segment-sum rows: ``out[r] = sum over k with rows[k]==r of values[k]``."""
    rows = np.asarray(rows, dtype=np.int64)
    if values.data.ndim != 2:
        raise ShapeError("scatter_rows expects 2-D values")
    channels = values.data.shape[1]
    out = np.empty((num_rows, channels), dtype=np.float64)
    for c in range(channels):
        out[:, c] = np.bincount(rows, weights=values.data[:, c], minlength=num_rows)

    def backward_fn(grad: np.ndarray) -> None:
        values._accumulate(grad[rows])

    return Tensor._from_op(out, (values,), backward_fn, "scatter_rows")


def weighted_rows(source: Tensor, rows: np.ndarray, weights: np.ndarray) -> Tensor:
    """Gather and blend rows: ``out[k] = sum_j weights[k, j] * source[rows[k, j]]``.

    ``source`` is ``(R, C)``; ``rows``/``weights`` are constant ``(K, J)``
    arrays. This one op covers bilinear (J=4) and trilinear (J=8) lookups;
    the interpolation weights depend only on fixed geometry, so no gradient
    flows into them. Backward scatter-adds with per-channel bincount, which
    is much faster than ``np.add.at``.
    """
    rows = np.asarray(rows)
    weights = np.asarray(weights, dtype=np.float64)
    if source.data.ndim != 2 or rows.shape != weights.shape:
        raise ShapeError("weighted_rows expects 2-D source and matching rows/weights")
    picked = source.data[rows]  # (K, J, C)
    out = np.einsum("kj,kjc->kc", weights, picked)
    n_rows = source.data.shape[0]
    flat_rows = rows.reshape(-1)
    flat_weights = weights.reshape(-1)

    def backward_fn(grad: np.ndarray) -> None:
        contrib = flat_weights[:, None] * np.repeat(grad, rows.shape[1], axis=0)
        acc = np.empty((n_rows, grad.shape[1]), dtype=np.float64)
        for c in range(grad.shape[1]):
            acc[:, c] = np.bincount(flat_rows, weights=contrib[:, c], minlength=n_rows)
        source._accumulate(acc)

    return Tensor._from_op(out, (source,), backward_fn, "weighted_rows")


# -- convolution ----------------------------------------------------------------


def _conv_nd(x: Tensor, kernel: Tensor, stride: int, padding: int, nd: int) -> Tensor:
    if x.data.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d input must have rank {nd + 2} (batch, spatial..., channels)")
    if kernel.data.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d kernel must have rank {nd + 2} (spatial..., in, out)")
    ksizes = kernel.data.shape[:nd]
    if any(k % 2 == 0 for k in ksizes):
        raise ShapeError(f"conv{nd}d kernel must be odd-sized, got {ksizes}")
    if kernel.data.shape[nd] != x.data.shape[-1]:
        raise ShapeError("kernel input channels do not match input")
    if stride < 1:
        raise ShapeError("stride must be >= 1")

    spatial = x.data.shape[1:-1]
    padded = tuple(s + 2 * padding for s in spatial)
    if any(p < k for p, k in zip(padded, ksizes)):
        raise ShapeError("kernel larger than padded input")
    out_spatial = tuple((p - k) // stride + 1 for p, k in zip(padded, ksizes))

    batch = x.data.shape[0]
    c_in = x.data.shape[-1]
    c_out = kernel.data.shape[-1]
    pad_spec = [(0, 0)] + [(padding, padding)] * nd + [(0, 0)]
    xp = np.pad(x.data, pad_spec) if padding else x.data

    def offset_slices(offset: tuple[int, ...]) -> tuple[slice, ...]:
        return tuple(
            slice(o, o + (n - 1) * stride + 1, stride)
            for o, n in zip(offset, out_spatial)
        )

    flat_out = int(np.prod(out_spatial)) * batch
    y = np.zeros((flat_out, c_out), dtype=np.float64)
    offsets = list(np.ndindex(*ksizes))
    for off in offsets:
        sl = (slice(None),) + offset_slices(off) + (slice(None),)
        patch = xp[sl].reshape(flat_out, c_in)
        y += patch @ kernel.data[off]
    out = y.reshape((batch,) + out_spatial + (c_out,))

    def backward_fn(grad: np.ndarray) -> None:
        g_flat = grad.reshape(flat_out, c_out)
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for off in offsets:
                sl = (slice(None),) + offset_slices(off) + (slice(None),)
                patch = xp[sl].reshape(flat_out, c_in)
                gk[off] = patch.T @ g_flat
            kernel._accumulate(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for off in offsets:
                sl = (slice(None),) + offset_slices(off) + (slice(None),)
                gxp[sl] += (g_flat @ kernel.data[off].T).reshape(
                    (batch,) + out_spatial + (c_in,)
                )
            if padding:
                crop = (slice(None),) + tuple(
                    slice(padding, padding + s) for s in spatial
                ) + (slice(None),)
                gx = gxp[crop]
            else:
                gx = gxp
            x._accumulate(gx)

    return Tensor._from_op(out, (x, kernel), backward_fn, f"conv{nd}d")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, input ``(B, H, W, Cin)``, kernel ``(kh, kw, Cin, Cout)``."""
    return _conv_nd(x, kernel, stride, padding, nd=2)


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation, input ``(B, D, H, W, Cin)``, kernel ``(kd, kh, kw, Cin, Cout)``."""
    return _conv_nd(x, kernel, stride, padding, nd=3)


# -- composed helpers -------------------------------------------------------------


def masked_softmax(scores: Tensor, mask: np.ndarray, axis: int = 0) -> Tensor:
    """Softmax over ``axis`` restricted to mask==1 entries; masked entries get 0.

    Positions where the mask is empty along ``axis`` produce a uniform
    distribution over that axis (callers flag those separately). The max
    shift is treated as a constant, which leaves gradients unchanged.
    """
    mask = np.asarray(mask, dtype=np.float64)
    neg = np.where(mask > 0.0, 0.0, -np.inf)
    shift = np.max(scores.data + neg, axis=axis, keepdims=True)
    none_valid = ~np.isfinite(shift)
    shift = np.where(none_valid, 0.0, shift)
    e = (scores - shift).exp() * mask
    denom = e.sum(axis=axis, keepdims=True)
    fix = np.where(denom.data <= 0.0, 1.0, 0.0)
    weights = e / (denom + fix)
    if np.any(none_valid):
        # all-masked positions fall back to a constant uniform (no gradient)
        uniform = np.broadcast_to(
            none_valid / scores.data.shape[axis], weights.data.shape
        )
        weights = add(weights, np.array(uniform, dtype=np.float64))
    return weights


def softmax(scores: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(scores.data, axis=axis, keepdims=True)
    e = (scores - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)
