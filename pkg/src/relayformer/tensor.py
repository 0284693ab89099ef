"""Dense tensors with reverse-mode automatic differentiation.

The engine is numpy-backed and deliberately small: it supports exactly the
operation set the network needs (elementwise arithmetic, matrix products,
shape manipulation, gather, masked softmax, ReLU, reductions, normalization
and affine maps). Each operation records its inputs and a backward closure;
``Tensor.backward`` replays the recorded graph once in reverse topological
order. Training runs in float32, gradient checks in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation on finite inputs produces NaN or Inf."""


_FINITE_CHECKS = True
_GRAD_ENABLED = True


@contextlib.contextmanager
def finite_checks_disabled():
    """Temporarily skip NaN/Inf output checks (used by hot inner loops)."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = False
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


@contextlib.contextmanager
def no_grad():
    """Skip tape construction entirely; outputs are plain leaf tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def mask_value(dtype) -> float:
    """Most negative finite value of ``dtype``; exp() of it underflows to 0."""
    return float(np.finfo(dtype).min)


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients.

    ``data`` is always a numpy float array (row-major). Tensors created by
    operations hold references to their inputs plus a backward closure; leaf
    tensors have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- construction ----------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- basic introspection ----------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    # -- autodiff core -----------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` into every reachable input.

        Visits each recorded node exactly once, in reverse topological
        order. ``seed`` defaults to 1 and is only optional for scalars.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward: implicit seed requires a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        _accumulate(self, seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    # method aliases used throughout the model code
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def permute(self, *axes):
        return permute(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(name: str, out: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[Tensor], None] | None) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name}: produced non-finite values")
    t = Tensor(out)
    if _GRAD_ENABLED and backward is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = lambda: backward(t)
    return t


# -- elementwise arithmetic --------------------------------------------------


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(t.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(t.grad, b.shape))

    return _make("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(t.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-t.grad, b.shape))

    return _make("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(t.grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(t.grad * a.data, b.shape))

    return _make("mul", out, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(t.grad / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-t.grad * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, -t.grad)

    return _make("neg", -a.data, (a,), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    with np.errstate(all="ignore"):
        out = a.data ** exponent

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, t.grad * exponent * a.data ** (exponent - 1.0))

    return _make("power", out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore", under="ignore"):
        out = np.exp(a.data)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, t.grad * t.data)

    return _make("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, t.grad / a.data)

    return _make("log", out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, t.grad * 0.5 / t.data)

    return _make("sqrt", out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0: the mask is strict
    keep = a.data > 0
    out = np.where(keep, a.data, 0.0).astype(a.dtype)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, t.grad * keep)

    return _make("relu", out, (a,), backward)


# -- matrix products ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = np.matmul(a.data, b.data)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            ga = np.matmul(t.grad, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), t.grad)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make("matmul", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` applied to the last axis."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, t.grad.reshape(a.shape))

    return _make("reshape", out, (a,), backward)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inverse = np.argsort(axes)
    out = np.transpose(a.data, axes)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, np.transpose(t.grad, inverse))

    return _make("permute", out, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(t: Tensor) -> None:
        for piece, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if piece.requires_grad:
                index = [slice(None)] * t.grad.ndim
                index[axis] = slice(start, stop)
                _accumulate(piece, t.grad[tuple(index)])

    return _make("concat", out, tensors, backward)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Split ``a`` along ``axis`` into consecutive pieces of the given sizes."""
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis of length {a.shape[axis]}")
    pieces: list[Tensor] = []
    start = 0
    for size in sizes:
        stop = start + size
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, stop)
        index = tuple(index)
        out = a.data[index]

        def backward(t: Tensor, index=index) -> None:
            if a.requires_grad:
                g = np.zeros_like(a.data)
                g[index] = t.grad
                _accumulate(a, g)

        pieces.append(_make("split", out, (a,), backward))
        start = stop
    return pieces


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather slices of ``a`` along ``axis`` by integer index (repetitions allowed)."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[axis]):
        raise ShapeError(
            f"take: index out of range for axis {axis} of length {a.shape[axis]}"
        )
    out = np.take(a.data, indices, axis=axis)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.data)
            moved = np.moveaxis(g, axis, 0)
            grad_moved = np.moveaxis(
                t.grad.reshape(a.shape[:axis] + indices.shape + a.shape[axis + 1:]),
                tuple(range(axis, axis + indices.ndim)),
                tuple(range(indices.ndim)),
            )
            np.add.at(moved, indices, grad_moved)
            _accumulate(a, g)

    return _make("take", out, (a,), backward)


# -- reductions --------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            g = t.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make("sum", out, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            g = t.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _make("mean", out, (a,), backward)


# -- softmax and masking -----------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis. Masked logits (most negative finite
    value of the dtype) yield exactly zero weight and zero gradient."""
    shift = a.data - a.data.max(axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        e = np.exp(shift)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            inner = (t.grad * t.data).sum(axis=-1, keepdims=True)
            _accumulate(a, t.data * (t.grad - inner))

    return _make("softmax", out, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    shift = a.data - a.data.max(axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        out = shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            total = t.grad.sum(axis=-1, keepdims=True)
            _accumulate(a, t.grad - np.exp(t.data) * total)

    return _make("log_softmax", out, (a,), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float | None = None) -> Tensor:
    """Replace entries where ``mask`` is True. The default fill is the most
    negative finite value of the dtype, so a following softmax assigns the
    masked slots exactly zero weight."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    fill = mask_value(a.dtype) if value is None else float(value)
    out = np.where(mask, np.asarray(fill, dtype=a.dtype), a.data)

    def backward(t: Tensor) -> None:
        if a.requires_grad:
            _accumulate(a, np.where(mask, 0.0, t.grad))

    return _make("masked_fill", out, (a,), backward)


# -- normalization -----------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(centered, sqrt(add(var, eps)))
    return add(mul(inv, gamma), beta)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    axes: tuple[int, ...],
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over ``axes``.

    In training mode the batch statistics are used and the running buffers
    are updated in place (``running = momentum * running + (1 - momentum)
    * batch``). In eval mode the running buffers are used as constants.
    """
    if training:
        mu = reduce_mean(x, axis=axes, keepdims=True)
        centered = sub(x, mu)
        var = reduce_mean(mul(centered, centered), axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data
        inv = div(centered, sqrt(add(var, eps)))
    else:
        mean_c = Tensor(running_mean.astype(x.dtype))
        var_c = Tensor(running_var.astype(x.dtype))
        inv = div(sub(x, mean_c), sqrt(add(var_c, eps)))
    return add(mul(inv, gamma), beta)


# -- gradients ---------------------------------------------------------------


def gradient(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``f(*inputs)`` with respect to each input.

    Inputs with ``requires_grad=False`` get a zero gradient rather than an
    error. Existing ``.grad`` buffers on the inputs are reset first.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError(f"gradient: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    return [
        t.grad if t.grad is not None else np.zeros_like(t.data)
        for t in inputs
    ]


def finite_difference_gradient(
    f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4
) -> list[np.ndarray]:
    """Central-difference gradient oracle, one coordinate at a time.

    Independent of the reverse-mode path: only evaluates ``f``. Intended
    for float64 inputs; float32 round-off swamps the differences.
    """
    if eps <= 0:
        raise ValueError("finite_difference_gradient: eps must be positive")
    inputs = list(inputs)
    grads = []
    with finite_checks_disabled(), no_grad():
        for t in inputs:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f(*inputs).data.reshape(()))
                flat[i] = orig - eps
                lo = float(f(*inputs).data.reshape(()))
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * eps)
            grads.append(g)
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
