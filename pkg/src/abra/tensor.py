"""A small reverse-mode autodiff tensor.

The op vocabulary is closed: every differentiable operation used by the model
zoo is defined here with a hand-written local gradient.  Storage is a
contiguous numpy array; ``reshape`` copies.

Gradients accumulate additively into leaf ``.grad`` buffers; call
``zero_grad`` (or set ``.grad = None``) between iterations.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_grad_enabled = True


class ShapeError(ValueError):
    pass


def set_profile(name: str) -> None:
    """Select the numeric profile: ``"float64"`` (tests) or ``"float32"`` (training)."""
    global _default_dtype
    try:
        _default_dtype = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown numeric profile {name!r}; expected one of {sorted(_DTYPES)}") from None


def get_profile() -> str:
    return "float64" if _default_dtype is np.float64 else "float32"


@contextlib.contextmanager
def profile(name: str):
    old = get_profile()
    set_profile(name)
    try:
        yield
    finally:
        set_profile(old)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype, copy=True, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        t.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    # -- basic properties ------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    # -- operators -------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return reduce_var(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=_default_dtype))


def _make(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    t = Tensor._wrap(out)
    t.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def arccos(a) -> Tensor:
    """Inverse cosine; inputs must lie strictly inside (-1, 1) for a finite gradient."""
    a = as_tensor(a)
    return _make(np.arccos(a.data), (a,), lambda g: (-g / np.sqrt(1.0 - a.data * a.data),), "arccos")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def grl(a) -> Tensor:
    """Gradient reversal: identity forward, negated gradient backward."""
    a = as_tensor(a)
    return _make(a.data.copy(), (a,), lambda g: (-g,), "grl")


def detach(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._wrap(a.data.copy())


# --------------------------------------------------------------------------
# shape and reductions
# --------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(out, ts, bw, "concat")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axes, keepdims).copy(),), "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise ShapeError(f"reduce-mean: empty reduction over axes {axes} of shape {a.shape}")
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand(g / count, a.shape, axes, keepdims).copy(),), "mean")


def reduce_var(a, axis=None, keepdims=False) -> Tensor:
    """Biased (1/n) variance."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise ShapeError(f"reduce-var: empty reduction over axes {axes} of shape {a.shape}")
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)

    def bw(g):
        return (_expand(g, a.shape, axes, keepdims) * (2.0 / count) * centered,)

    return _make(np.asarray(out), (a,), bw, "var")


# --------------------------------------------------------------------------
# linear algebra and convolution
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with kernels ``w`` (F,C,kh,kw); no bias."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = _kernels.conv_out_size(h, kh, stride, pad)
    wo = _kernels.conv_out_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    cols = _kernels.im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(f, -1)
    out = (w2 @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = _kernels.col2im(w2.T @ g2, x.shape, kh, kw, stride, pad) if x.requires_grad else None
        return gx, gw

    return _make(out, (x, w), bw, "conv2d")


def avg_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k×k average pooling; H and W must be multiples of k."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg-pool: spatial shape {x.shape} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g / (k * k),)

    return _make(out, (x,), bw, "avg_pool2d")


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global-average-pool: expected rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    return _make(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
        "global_avg_pool",
    )


# --------------------------------------------------------------------------
# classification helpers
# --------------------------------------------------------------------------

def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def normalize_rows(x) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean length."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"normalize: expected rank-2 input, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    out = x.data / norms

    def bw(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return _make(out, (x,), bw, "normalize")


def cosine_rows(a, b) -> Tensor:
    """(N, D) x (M, D) -> (N, M) cosine of the angle between every row pair."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine: incompatible shapes {a.shape} and {b.shape}")
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank-2 input, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def pick(x, index: np.ndarray) -> Tensor:
    """Select ``x[n, index[n]]`` from a 2-D tensor, giving shape (N,)."""
    x = as_tensor(x)
    index = np.asarray(index)
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, index), g)
        return (gx,)

    return _make(out, (x,), bw, "pick")


def slice_rows(x, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the first axis."""
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"slice-rows: [{start}:{stop}] out of range for shape {x.shape}")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(x.data[start:stop].copy(), (x,), bw, "slice_rows")


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not on the graph (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@contextlib.contextmanager
def frozen(params: Iterable[Tensor]):
    """Detach ``params`` from the graph for the duration of the block."""
    params = list(params)
    old = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, old):
            p.requires_grad = flag
