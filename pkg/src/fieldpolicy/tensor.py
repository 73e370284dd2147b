"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array.  Every operation on tensors that require
gradients records its parents and a backward rule; ``backward`` walks that
graph in reverse topological order and accumulates ``dLoss/dLeaf`` into the
``grad`` attribute of every leaf with ``requires_grad=True``.

Layout convention for volumes is channels-last: ``(B, D, H, W, C)``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_COL_CACHE_BYTES = 192 * 2 ** 20


class ShapeError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=True)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def astype(a: Tensor, dtype) -> Tensor:
    src = a.dtype
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


# -- nonlinearities ---------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)

    def bw(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _make(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out.astype(x.dtype), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


# -- reductions -------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size / max(out.size, 1)

    def bw(g):
        return (_expand_reduced(g / count, a.shape, axis, keepdims),)

    return _make(out, (a,), bw)


def max_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Maximum along one axis (or globally).  Ties route gradient to the first maximum."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = np.asarray(flat[idx])

        def bw_all(g):
            grad = np.zeros(flat.shape, dtype=a.dtype)
            grad[idx] = g
            return (grad.reshape(a.shape),)

        return _make(out.reshape((1,) * a.ndim) if keepdims else out, (a,), bw_all)

    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        grad = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, idx, gk, axis=axis)
        return (grad,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), bw)


def cumsum_exclusive(a: Tensor, axis: int = -1) -> Tensor:
    """Running sum that excludes the current element: out[i] = sum_{j<i} a[j]."""
    out = np.cumsum(a.data, axis=axis) - a.data

    def bw(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (rev - g,)

    return _make(out, (a,), bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias over the last axis, flattening leading axes into one GEMM."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out.reshape(lead + (weight.shape[1],)), parents, bw)


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    # materialise so downstream reductions run over contiguous memory
    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                 lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = [t.shape for t in ts]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _make(out, (a,), bw)


def gather(a: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """take_along_axis with a scatter-add backward."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != a.ndim:
        raise ShapeError(f"gather: index rank {indices.ndim} differs from tensor rank {a.ndim}")
    axis = axis % a.ndim
    out = np.take_along_axis(a.data, indices, axis=axis)

    def bw(g):
        grad = np.zeros_like(a.data)
        grids = list(np.indices(indices.shape, sparse=True))
        grids[axis] = indices
        np.add.at(grad, tuple(grids), g)
        return (grad,)

    return _make(out, (a,), bw)


# -- volumetric operations ----------------------------------------------------

def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D convolution on channels-last volumes.

    x: (B, D, H, W, Cin); weight: (k, k, k, Cin, Cout); bias: (Cout,).
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-D input and weight, got {x.shape} and {weight.shape}")
    k = weight.shape[0]
    cin, cout = weight.shape[3], weight.shape[4]
    if x.shape[-1] != cin or weight.shape[1] != k or weight.shape[2] != k:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weight {weight.shape}")
    B = x.shape[0]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    dims = xp.shape[1:4]
    if any(d < k for d in dims):
        raise ShapeError(f"conv3d: padded spatial extent {dims} smaller than kernel {k}")
    out_dims = tuple((d - k) // stride + 1 for d in dims)
    Do, Ho, Wo = out_dims
    n_out = B * Do * Ho * Wo
    w = weight.data
    offsets = [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]
    # output-side accumulation avoids k^3 input copies when Cout is small
    output_side = stride == 1 and cout < cin
    cols = None

    def window(arr, i, j, l):
        return arr[:, i:i + stride * (Do - 1) + 1:stride, j:j + stride * (Ho - 1) + 1:stride,
                   l:l + stride * (Wo - 1) + 1:stride]

    if output_side:
        wmat = np.ascontiguousarray(np.moveaxis(w, 3, 0)).reshape(cin, k ** 3 * cout)
        z = (xp.reshape(-1, cin) @ wmat).reshape(xp.shape[:4] + (k ** 3, cout))
        out = np.zeros((B, Do, Ho, Wo, cout), dtype=x.dtype)
        for n, (i, j, l) in enumerate(offsets):
            out += window(z, i, j, l)[..., n, :]
        del z
    else:
        keep_cols = weight.requires_grad and _GRAD_ENABLED and k ** 3 * n_out * cin * x.dtype.itemsize <= _COL_CACHE_BYTES
        cols = np.empty((k ** 3, n_out, cin), dtype=x.dtype) if keep_cols else None
        out = np.zeros((n_out, cout), dtype=x.dtype)
        buf = np.empty_like(out)
        for n, (i, j, l) in enumerate(offsets):
            if keep_cols:
                np.copyto(cols[n].reshape(B, Do, Ho, Wo, cin), window(xp, i, j, l))
                c = cols[n]
            else:
                c = np.ascontiguousarray(window(xp, i, j, l)).reshape(n_out, cin)
            np.matmul(c, w[i, j, l], out=buf)
            out += buf
        out = out.reshape(B, Do, Ho, Wo, cout)
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(n_out, cout)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w) if weight.requires_grad else None
        if output_side:
            dz = np.zeros(xp.shape[:4] + (k ** 3, cout), dtype=x.dtype)
            for n, (i, j, l) in enumerate(offsets):
                window(dz, i, j, l)[..., n, :] += g
            dz2 = dz.reshape(-1, k ** 3 * cout)
            if gxp is not None:
                gxp = (dz2 @ wmat.T).reshape(xp.shape)
            if gw is not None:
                gw = np.moveaxis((xp.reshape(-1, cin).T @ dz2).reshape((cin, k, k, k, cout)), 0, 3)
        else:
            if gw is not None and cols is not None:
                gw = np.matmul(cols.transpose(0, 2, 1), g2).reshape(w.shape)
            buf = np.empty((n_out, cin), dtype=x.dtype) if gxp is not None else None
            for n, (i, j, l) in enumerate(offsets):
                if gw is not None and cols is None:
                    c = np.ascontiguousarray(window(xp, i, j, l)).reshape(n_out, cin)
                    gw[i, j, l] = c.T @ g2
                if gxp is not None:
                    np.matmul(g2, w[i, j, l].T, out=buf)
                    window(gxp, i, j, l)[...] += buf.reshape(B, Do, Ho, Wo, cin)
        gx = None
        if gxp is not None:
            p = padding
            gx = gxp[:, p:p + x.shape[1], p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _make(out, parents, bw)


def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """1-D linear resampling matrix with cell-centre alignment and edge clamping."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _apply_axis(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    out = moved @ mat.T
    return np.moveaxis(out, -1, axis)


def resize_trilinear(x: Tensor, size: Sequence[int]) -> Tensor:
    """Resample a (B, D, H, W, C) volume to spatial ``size`` by separable linear interpolation."""
    if x.ndim != 5:
        raise ShapeError(f"resize_trilinear: expected 5-D input, got {x.shape}")
    mats = [interp_matrix(n_out, n_in, x.dtype) for n_out, n_in in zip(size, x.shape[1:4])]
    out = x.data
    for axis, m in zip((1, 2, 3), mats):
        if m.shape[0] != m.shape[1] or not np.array_equal(m, np.eye(m.shape[0])):
            out = _apply_axis(out, m, axis)
    out = np.ascontiguousarray(out)

    def bw(g):
        for axis, m in zip((1, 2, 3), mats):
            g = _apply_axis(g, m.T, axis)
        return (np.ascontiguousarray(g),)

    return _make(out, (x,), bw)


def _corner_weights(u: np.ndarray, n: np.ndarray):
    """Lower corner index, fractional offset and in-range mask for continuous indices u."""
    inside = (u >= 0) & (u <= n - 1)
    uc = np.clip(u, 0, n - 1)
    i0 = np.minimum(np.floor(uc).astype(np.int64), np.maximum(n - 2, 0))
    frac = uc - i0
    return i0, frac, inside


def grid_sample(volume: Tensor, points: Tensor | np.ndarray, batch_index: np.ndarray | None = None) -> Tensor:
    """Trilinear lookup of a (B, D, H, W, C) volume at normalised points.

    ``points`` is (M, 3) with each coordinate in [0, 1] spanning the grid
    (cell centres at (i + 0.5) / n).  Points outside are clamped to the
    boundary cell centres.  ``batch_index`` (M,) selects the volume of each
    point; defaults to volume 0.
    """
    if volume.ndim != 5:
        raise ShapeError(f"grid_sample: expected 5-D volume, got {volume.shape}")
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=volume.dtype))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"grid_sample: points must be (M, 3), got {pts.shape}")
    B, D, H, W, C = volume.shape
    M = pts.shape[0]
    dims = np.array([D, H, W])
    if batch_index is None:
        batch_index = np.zeros(M, dtype=np.int64)
    u = pts.data.astype(np.float64) * dims - 0.5
    i0, frac, inside = _corner_weights(u, dims)
    if np.any(dims == 1):
        i0 = np.where(dims == 1, 0, i0)
        frac = np.where(dims == 1, 0.0, frac)
    base = batch_index.astype(np.int64) * (D * H * W)
    cols = []
    vals = []
    corners = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    step = (dims > 1).astype(np.int64)
    for a, b, c in corners:
        ia = i0[:, 0] + a * step[0]
        ib = i0[:, 1] + b * step[1]
        ic = i0[:, 2] + c * step[2]
        wa = frac[:, 0] if a else 1.0 - frac[:, 0]
        wb = frac[:, 1] if b else 1.0 - frac[:, 1]
        wc = frac[:, 2] if c else 1.0 - frac[:, 2]
        cols.append(base + (ia * H + ib) * W + ic)
        vals.append(wa * wb * wc)
    rows = np.tile(np.arange(M), 8)
    smat = sp.csr_matrix((np.concatenate(vals).astype(volume.dtype), (rows, np.concatenate(cols))),
                         shape=(M, B * D * H * W))
    flat = volume.data.reshape(-1, C)
    out = np.asarray(smat @ flat)

    def bw(g):
        gv = None
        if volume.requires_grad:
            gv = np.asarray(smat.T @ g).reshape(volume.shape)
        gp = None
        if pts.requires_grad:
            gp = np.zeros((M, 3), dtype=np.float64)
            corner_vals = [flat[cols[n]] for n in range(8)]
            for axis in range(3):
                acc = np.zeros((M, C))
                for n, corner in enumerate(corners):
                    dw = np.ones(M)
                    for ax2 in range(3):
                        bit = corner[ax2]
                        if ax2 == axis:
                            dw = dw * (1.0 if bit else -1.0)
                        else:
                            dw = dw * (frac[:, ax2] if bit else 1.0 - frac[:, ax2])
                    acc += dw[:, None] * corner_vals[n]
                gp[:, axis] = (acc * g).sum(axis=1) * dims[axis] * inside[:, axis] * (dims[axis] > 1)
            gp = gp.astype(pts.dtype)
        return gv, gp

    return _make(out, (volume, pts), bw)


# -- backward engine --------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- finite-difference checking -------------------------------------------

class GradcheckError(ValueError):
    pass


def _numeric_grad(f, tensors: list[Tensor], eps: float) -> list[np.ndarray]:
    out = []
    for t in tensors:
        g = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*tensors).data)
            flat[i] = orig - eps
            fm = float(f(*tensors).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def _has_kink(f, tensors: list[Tensor], eps: float, f0: float, tol: float) -> bool:
    for t in tensors:
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*tensors).data)
            flat[i] = orig - eps
            fm = float(f(*tensors).data)
            flat[i] = orig
            right, left = (fp - f0) / eps, (f0 - fm) / eps
            if abs(right - left) > tol * max(1.0, abs(right), abs(left)) + 1e3 * eps:
                return True
    return False


def gradcheck(f: Callable[..., Tensor], inputs, eps: float = 1e-5, retries: int = 0,
              rng: np.random.Generator | None = None, jitter: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to a scalar tensor.  Error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).  Inputs are cast to
    float64 in place.

    Functions with kinks (rectifiers, max) are not differentiable everywhere.
    With ``retries > 0`` a probe point at which a one-sided slope disagreement
    is detected is re-drawn by adding uniform noise of size ``jitter`` before
    measuring, up to ``retries`` times.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        t.data = np.ascontiguousarray(t.data, dtype=np.float64)
        t.requires_grad = True
    rng = rng or np.random.default_rng(0)
    for attempt in range(retries + 1):
        f0 = f(*tensors)
        if f0.size != 1:
            raise GradcheckError(f"gradcheck: function must return a scalar, got {f0.shape}")
        if not np.isfinite(f0.data).all():
            raise GradcheckError("gradcheck: function value is not finite")
        if attempt < retries and _has_kink(f, tensors, eps, float(f0.data), 1e-3):
            for t in tensors:
                t.data = np.ascontiguousarray(t.data + rng.uniform(-jitter, jitter, size=t.shape))
            continue
        break
    for t in tensors:
        t.grad = None
    with _grad_mode(True):
        f(*tensors).backward()
    analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in tensors]
    with no_grad():
        numeric = _numeric_grad(f, tensors, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if not (np.isfinite(a).all() and np.isfinite(n).all()):
            raise GradcheckError("gradcheck: non-finite gradient")
        if a.size:
            err = np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
            worst = max(worst, float(err.max()))
    return worst


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def zeros(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def collect_leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t._backward is None]
