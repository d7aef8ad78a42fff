"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every op that sees at least one input with ``requires_grad`` appends a node to
the active :class:`Tape`. Append order is a valid topological order, so
:func:`backward` simply walks the tape in reverse.

Shapes follow the layout used by the model: feature maps are ``H x T x C``
(frequency, time, channel), optionally with a leading batch axis.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

STD_EPS = 1e-8
DEFAULT_LEAKY_SLOPE = 0.01

_DTYPES = {"f64": np.float64, "f32": np.float32}
_state = threading.local()


def _tls():
    if not hasattr(_state, "tapes"):
        _state.tapes = [Tape()]
        _state.grad_enabled = True
        _state.dtype = np.float64
    return _state


def set_default_dtype(dtype) -> None:
    """Select the float type of newly created tensors ("f64"/"f32" or a numpy dtype)."""
    _tls().dtype = np.dtype(_DTYPES.get(dtype, dtype)).type


def get_default_dtype():
    return _tls().dtype


@contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _tls().dtype = prev


@contextmanager
def no_grad():
    st = _tls()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager to make it the active tape for the current
    thread. Clearing drops every recorded node; leaf tensors (weights) are
    not owned by the tape and survive.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self):
        _tls().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tls().tapes.pop()
        return False


def current_tape() -> Tape:
    return _tls().tapes[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported; scale by a constant instead")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = _tls().grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        current_tape().nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every reachable ``x`` with ``requires_grad``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape() if tape is None else tape
    if not tape.nodes:
        raise ContractError("backward called on an empty tape")
    pending: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for node in reversed(tape.nodes):
        entry = pending.pop(id(node.out), None)
        if entry is None:
            continue
        g = entry[1]
        _accumulate(node.out, g, copy=False)
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            slot = pending.get(id(parent))
            if slot is None:
                pending[id(parent)] = [parent, pg]
            else:
                slot[1] = slot[1] + pg
    for t, g in pending.values():
        _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray, copy: bool = True) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy() if copy else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return _record(x ** p, (a,), lambda g: (g * p * x ** (p - 1),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is passed only where no clamping happened."""
    x = a.data
    y = np.clip(x, lo, hi)
    inside = (y == x).astype(x.dtype)
    return _record(y, (a,), lambda g: (g * inside,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(a: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    x = a.data
    # elementwise multiplier: exactly 1 where x > 0, exactly ``slope`` elsewhere
    d = np.maximum((x > 0).astype(x.dtype), x.dtype.type(slope))
    return _record(x * d, (a,), lambda g: (g * d,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _record(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# --- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _record(np.stack([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# --- reductions ------------------------------------------------------------

def _check_axis(a: Tensor, axis):
    if axis is not None and a.shape[axis] < 1:
        raise DimensionError(f"reduction over empty axis {axis} of shape {a.shape}")
    if axis is None and a.size < 1:
        raise DimensionError("reduction over an empty tensor")


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                   lambda g: (np.array(_expand(g, shape, axis, keepdims)),))


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    _check_axis(a, axis)
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    return _record(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                   lambda g: (np.array(_expand(g, shape, axis, keepdims)) / n,))


def std(a: Tensor, axis=None, keepdims=False, eps: float = STD_EPS) -> Tensor:
    """Population standard deviation with ``eps`` added under the root."""
    _check_axis(a, axis)
    x = a.data
    n = x.size if axis is None else x.shape[axis]
    centered = x - x.mean(axis=axis, keepdims=True)
    s_keep = np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    out = s_keep if keepdims else s_keep.reshape(np.sum(centered, axis=axis).shape)

    def bw(g):
        return (np.reshape(g, s_keep.shape) * centered / (n * s_keep),)

    return _record(out, (a,), bw)


def _arg_reduce(a: Tensor, axis: int, keepdims: bool, pick) -> Tensor:
    _check_axis(a, axis)
    x = a.data
    idx = np.expand_dims(pick(x, axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(x)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _record(out, (a,), bw)


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; ties route the gradient to the first occurrence."""
    return _arg_reduce(a, axis, keepdims, np.argmax)


def min_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return _arg_reduce(a, axis, keepdims, np.argmin)


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    k, n = bd.shape

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _record(ad @ bd, (a, b), bw)


def _same_pads(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def _conv_shifted(xp, kd, out_hw, need_x, need_k):
    """Sum of h*w shifted GEMMs over a row-flattened padded input.

    Each padded image occupies ``S = Hp*Tp`` rows of a 2-D ``(rows, cin)``
    buffer; output row ``b*S + y*Tp + t`` reads input rows offset by
    ``i*Tp + j``. Rows with ``t >= To`` or ``y >= Ho`` are scratch.
    """
    n, Hp, Tp, cin = xp.shape
    h, w, _, f = kd.shape
    Ho, To = out_hw
    S = Hp * Tp
    rows = n * S
    extra = (h - 1) * Tp + (w - 1)
    flat = np.zeros((rows + extra, cin), dtype=xp.dtype)
    flat[:rows] = xp.reshape(rows, cin)
    offsets = [(i, j, i * Tp + j) for i in range(h) for j in range(w)]
    full = np.zeros((rows, f), dtype=xp.dtype)
    for i, j, off in offsets:
        full += flat[off:off + rows] @ kd[i, j]
    out = full.reshape(n, Hp, Tp, f)[:, :Ho, :To, :]

    def bw(g):
        gfull = np.zeros((n, Hp, Tp, f), dtype=xp.dtype)
        gfull[:, :Ho, :To, :] = g
        gfull = gfull.reshape(rows, f)
        gk = np.empty_like(kd) if need_k else None
        gflat = np.zeros_like(flat) if need_x else None
        for i, j, off in offsets:
            if need_k:
                gk[i, j] = flat[off:off + rows].T @ gfull
            if need_x:
                gflat[off:off + rows] += gfull @ kd[i, j].T
        gxp = gflat[:rows].reshape(n, Hp, Tp, cin) if need_x else None
        return gxp, gk

    return out, bw


def _conv_im2col(xp, kd, need_x, need_k):
    n = xp.shape[0]
    h, w, cin, f = kd.shape
    win = sliding_window_view(xp, (h, w), axis=(1, 2))  # n, Ho, To, cin, h, w
    Ho, To = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * Ho * To, h * w * cin)
    kmat = kd.reshape(h * w * cin, f)
    out = (cols @ kmat).reshape(n, Ho, To, f)

    def bw(g):
        g2 = g.reshape(-1, f)
        gk = (cols.T @ g2).reshape(h, w, cin, f) if need_k else None
        gxp = None
        if need_x:
            gcols = (g2 @ kmat.T).reshape(n, Ho, To, h, w, cin)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(h):
                for j in range(w):
                    gxp[:, i:i + Ho, j:j + To, :] += gcols[:, :, :, i, j, :]
        return gxp, gk

    return out, bw


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """2-D cross-correlation, stride 1.

    ``x`` is ``H x T x Cin`` or ``N x H x T x Cin``; ``kernels`` is
    ``h x w x Cin x f``. ``padding`` is ``"same"`` (zero padding keeping
    ``H x T``) or ``"valid"``.
    """
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding mode {padding!r}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    kd = kernels.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise DimensionError(f"conv2d expects HxTxC input and hxwxCxf kernels, got {x.shape}, {kernels.shape}")
    n, H, T, cin = xd.shape
    h, w, kcin, f = kd.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if padding == "same":
        ph, pw = _same_pads(h), _same_pads(w)
    else:
        ph, pw = (0, 0), (0, 0)
    if h > H + sum(ph) or w > T + sum(pw):
        raise DimensionError(f"conv2d kernel {h}x{w} larger than padded input {x.shape}")
    xp = np.pad(xd, ((0, 0), ph, pw, (0, 0))) if padding == "same" else xd
    Ho, To = xp.shape[1] - h + 1, xp.shape[2] - w + 1
    if padding == "same" and cin >= 8:
        out, conv_bw = _conv_shifted(xp, kd, (Ho, To), x.requires_grad, kernels.requires_grad)
    else:
        out, conv_bw = _conv_im2col(xp, kd, x.requires_grad, kernels.requires_grad)
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]

    def bw(g):
        if squeeze:
            g = g[None]
        gxp, gk = conv_bw(g)
        gx = None
        if gxp is not None:
            gx = gxp[:, ph[0]:ph[0] + H, pw[0]:pw[0] + T, :]
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, g.reshape(-1, f).sum(axis=0)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return _record(np.ascontiguousarray(out), parents, bw)


def maxpool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling over the H and T axes.

    Ties route the gradient to the first cell of the window in row-major
    (frequency, then time) order.
    """
    ph, pw = kernel
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, H, T, f = xd.shape
    if H % ph or T % pw:
        raise DimensionError(f"maxpool {ph}x{pw} does not divide input {x.shape}")
    offsets = [(i, j) for i in range(ph) for j in range(pw)]
    out = xd[:, 0::ph, 0::pw, :]
    arg = np.zeros(out.shape, dtype=np.int8)
    for k, (i, j) in enumerate(offsets[1:], start=1):
        cand = xd[:, i::ph, j::pw, :]
        better = cand > out
        out = np.maximum(out, cand)
        np.copyto(arg, k, where=better)
    if squeeze:
        out = out[0]

    def bw(g):
        if squeeze:
            g = g[None]
        gx = np.zeros(xd.shape, dtype=xd.dtype)
        for k, (i, j) in enumerate(offsets):
            np.multiply(g, arg == k, out=gx[:, i::ph, j::pw, :])
        return (gx[0] if squeeze else gx,)

    return _record(out, (x,), bw)
