"""Dense tensor engine with reverse-mode automatic differentiation.

Feature maps are stored channels-first (batch, C, H, W) in row-major order,
so pixel (y, x) flattens to spatial index y * W + x. Runtime math uses
float32; verification paths (gradient checks, reference oracles) build
float64 tensors instead. Every operation is a pure function returning a new
Tensor and never writes to its inputs, so concurrent evaluation on distinct
inputs is safe. The gradient of a scalar expression is computed in reverse
mode over the operation graph recorded while the expression was built.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "zeros",
    "ones",
    "full",
    "no_grad",
    "track_allocations",
    "AllocationTracker",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "permute",
    "swap_last2",
    "reshape",
    "reduce",
    "sum_all",
    "mean_all",
    "softmax_axis",
    "relu",
    "sigmoid",
    "tanh",
    "conv2d",
    "upsample_nearest2x",
    "concat",
    "narrow",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes (or an axis argument) are inconsistent with an operation."""


# ---------------------------------------------------------------------------
# thread-local evaluation state: gradient recording flag, allocation tracker

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _tracker():
    return getattr(_state, "tracker", None)


@contextmanager
def no_grad():
    """Disable operation-graph recording inside the block (pure inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class AllocationTracker:
    """Tallies elements of every Tensor materialized while installed.

    Used by the benchmark and the memory-scaling assertions: the total is an
    exact count of auxiliary elements created by the code under measurement,
    independent of timer noise.
    """

    def __init__(self):
        self.elements = 0

    def add(self, n):
        self.elements += int(n)


@contextmanager
def track_allocations():
    prev = _tracker()
    tracker = AllocationTracker()
    _state.tracker = tracker
    try:
        yield tracker
    finally:
        _state.tracker = prev


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """Dense n-dimensional array of real scalars, a node in the op graph.

    `data` is a numpy array (float32 or float64) that must not be mutated
    after construction. Leaf tensors carry `requires_grad`; tensors produced
    by operations remember their parents and a backward rule. After calling
    `backward()` on a scalar result, `grad` holds d(result)/d(tensor) for
    every tensor in the graph that requires a gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        t = _tracker()
        if t is not None:
            t.add(arr.size)

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        """Reverse-mode gradient of this scalar w.r.t. every graph tensor."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        topo = _toposort(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g
            if node._backward is None:
                continue
            for parent, gp in zip(node._parents, node._backward(g)):
                if gp is None:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + gp
                else:
                    pending[key] = gp

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{grad})"


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor(arr)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)


def _result(data, parents, backward) -> Tensor:
    if _grad_enabled() and any(p.requires_grad or p._backward is not None for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise TypeError(
                f"mixed dtypes {a.data.dtype.name} and {b.data.dtype.name}; "
                "cast explicitly"
            )
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, dtype=a.data.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, dtype=b.data.dtype), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _result(-a.data, (a,), backward)


def scale(a, factor: float) -> Tensor:
    """Multiply every element by a python scalar."""
    a = as_tensor(a)
    f = a.data.dtype.type(factor)
    out = a.data * f

    def backward(g):
        return (g * f,)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and structure ops


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires at least 2-d operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _result(out, (a, b), backward)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward)


def swap_last2(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), backward)


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def reduce(a, axis: int, mode: str = "sum") -> Tensor:
    """Remove `axis` by summing or averaging along it."""
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim, "reduce")
    if mode not in ("sum", "mean"):
        raise ValueError(f"reduce: unknown mode {mode!r}")
    n = a.data.shape[axis]
    out = a.data.sum(axis=axis) if mode == "sum" else a.data.mean(axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        if mode == "mean":
            g = g / n
        return (np.broadcast_to(g, a.data.shape),)

    return _result(out, (a,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.broadcast_to(g, a.data.shape),)

    return _result(a.data.sum(), (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.size)


def softmax_axis(a, axis: int) -> Tensor:
    """Numerically stabilized softmax along one axis; slices sum to 1."""
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim, "softmax_axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _result(y, (a,), backward)


# ---------------------------------------------------------------------------
# activations


def _relu_backward(xdata: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (xdata > 0)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (_relu_backward(a.data, g),)

    return _result(np.maximum(a.data, 0), (a,), backward)


def _sigmoid_backward(ydata: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * ydata * (1.0 - ydata)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (_sigmoid_backward(y, g),)

    return _result(y, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), backward)


# ---------------------------------------------------------------------------
# convolution


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Window-unfold a padded (B, C, Hp, Wp) array to (B, C*k*k, Ho*Wo).

    Filled tap by tap with plain slice copies, which keeps the memory
    traffic sequential; the receptive-field axis is ordered (c, ky, kx).
    """
    b, c = xp.shape[0], xp.shape[1]
    col = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        ye = ky + stride * (ho - 1) + 1
        for kx in range(k):
            xe = kx + stride * (wo - 1) + 1
            col[:, :, ky, kx] = xp[:, :, ky:ye:stride, kx:xe:stride]
    return col.reshape(b, c * k * k, ho * wo)


def _col2im(dcol: np.ndarray, xshape, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add window gradients (B, C*k*k, Ho*Wo) back onto the input."""
    b, c, h, w = xshape
    hw = dcol.shape[-1]
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    ho = (h + 2 * pad - k) // stride + 1
    wo = hw // ho
    dcol = dcol.reshape(b, c, k, k, ho, wo)
    for ky in range(k):
        ye = ky + stride * (ho - 1) + 1
        for kx in range(k):
            xe = kx + stride * (wo - 1) + 1
            dxp[:, :, ky:ye:stride, kx:xe:stride] += dcol[:, :, ky, kx]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _conv_gemm(col3: np.ndarray, wmat: np.ndarray, bias: np.ndarray, b, ho, wo):
    """weights @ (B, Cin*k*k, L) plus bias, shaped to (B, Cout, Ho, Wo)."""
    out = np.matmul(wmat, col3)
    out += bias[:, None]
    return out.reshape(b, wmat.shape[0], ho, wo)


def _conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution of (B, Cin, H, W) with (Cout, Cin, k, k), zero padding.

    Output extent per axis is (n + 2*pad - k) // stride + 1. The kernel must
    be square with odd extent.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b, dtype=x.data.dtype)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects input (B, C, H, W), got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d expects weight (Cout, Cin, k, k), got {w.shape}")
    cout, cin, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd extent, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {cin}"
        )
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} filters")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or pad {pad}")
    bsz, _, h, wdt = x.shape
    ho = _conv_out_extent(h, kh, stride, pad)
    wo = _conv_out_extent(wdt, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: output extent {ho}x{wo} is empty for input {h}x{wdt}"
        )

    wmat = w.data.reshape(cout, -1)
    col = _im2col(_pad_hw(x.data, pad), kh, stride, ho, wo)
    out = _conv_gemm(col, wmat, b.data, bsz, ho, wo)

    def backward(g):
        g3 = g.reshape(bsz, cout, ho * wo)
        db = g3.sum(axis=(0, 2))
        col = _im2col(_pad_hw(x.data, pad), kh, stride, ho, wo)
        dw = np.matmul(g3, col.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcol = np.matmul(wmat.T, g3)
        dx = _col2im(dcol, x.shape, kh, stride, pad)
        return dx, dw, db

    return _result(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# resampling and assembly


def upsample_nearest2x(a) -> Tensor:
    """Double both spatial extents of (B, C, H, W) by pixel repetition."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects (B, C, H, W), got {a.shape}")
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    b, c, h, w = a.shape

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (a,), backward)


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    axis = _check_axis(axis, parts[0].ndim, "concat")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(out, tuple(parts), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries along `axis` starting at `start`."""
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim, "narrow")
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) exceeds extent "
            f"{a.data.shape[axis]} on axis {axis}"
        )
    index = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(a.ndim)
    )

    def backward(g):
        dx = np.zeros_like(a.data)
        dx[index] = g
        return (dx,)

    return _result(a.data[index], (a,), backward)
