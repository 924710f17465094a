"""Reverse-mode autodiff over float64 numpy arrays.

Each op builds an output ``Tensor`` holding its parents and a closure that
pushes ``out.grad`` back into them.  Every op checks that its values are
finite and raises ``FloatingPointError`` otherwise.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, grad=None, retain_graph: bool = False):
        """Propagate gradients to every tensor in the graph that requires them.

        The graph is released afterwards unless ``retain_graph``; closures and
        outputs form reference cycles that would otherwise pin activations.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
        if not retain_graph:
            for node in topo:
                node._backward = None
                node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or inf; ``index`` locates the first bad entry."""

    def __init__(self, index: tuple):
        super().__init__(f"non-finite value produced at index {index}")
        self.index = index


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_factory) -> Tensor:
    if not np.isfinite(data).all():
        bad = np.argwhere(~np.isfinite(data))
        raise NonFiniteError(tuple(int(v) for v in bad[0]) if len(bad) else ())
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_factory(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def f():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.shape))
        return f
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def f():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad, b.shape))
        return f
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def f():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.shape))
        return f
    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    q = a.data / b.data

    def bw(out):
        def f():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad * q / b.data, b.shape))
        return f
    return _make(q, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def bw(out):
        return lambda: x._accum(out.grad * e)
    return _make(e, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(out):
        return lambda: x._accum(out.grad / x.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _make(np.log(x.data), (x,), bw)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""
    s = np.sign(x.data)

    def bw(out):
        return lambda: x._accum(out.grad * s)
    return _make(np.abs(x.data), (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0

    def bw(out):
        return lambda: x._accum(np.where(pos, out.grad, slope * out.grad))
    return _make(np.where(pos, x.data, slope * x.data), (x,), bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(out):
        return lambda: x._accum(out.grad * inside)
    return _make(np.clip(x.data, lo, hi), (x,), bw)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(out):
        def f():
            if a.requires_grad:
                a._accum(_unbroadcast(np.where(cond, out.grad, 0.0), a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.where(cond, 0.0, out.grad), b.shape))
        return f
    return _make(np.where(cond, a.data, b.data), (a, b), bw)


# ------------------------------------------------------------------ shape

def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(out):
        def f():
            g = np.zeros_like(x.data)
            if basic:
                g[idx] += out.grad
            else:
                np.add.at(g, idx, out.grad)
            x._accum(g)
        return f
    return _make(np.array(x.data[idx]), (x,), bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(out):
        def f():
            for t, g in zip(tensors, np.split(out.grad, sizes, axis=axis)):
                if t.requires_grad:
                    t._accum(g)
        return f
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# ------------------------------------------------------------------ reductions

def sum_all(x: Tensor) -> Tensor:
    def bw(out):
        return lambda: x._accum(np.broadcast_to(out.grad, x.shape))
    return _make(np.asarray(x.data.sum()), (x,), bw)


def masked_sum(x: Tensor, mask: np.ndarray) -> Tensor:
    """Sum of ``x`` over entries where ``mask`` is true; zero (and zero gradient) for an empty mask."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)

    def bw(out):
        return lambda: x._accum(np.where(m, out.grad, 0.0))
    return _make(np.asarray(np.where(m, x.data, 0.0).sum()), (x,), bw)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    n = int(np.broadcast_to(np.asarray(mask, dtype=bool), x.shape).sum())
    s = masked_sum(x, mask)
    return s if n == 0 else mul(s, 1.0 / n)


def channel_min(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Minimum over axis 1; gradient goes only to the argmin channel (lowest index on ties)."""
    k = np.argmin(x.data, axis=1)
    vals = np.take_along_axis(x.data, k[:, None], axis=1)[:, 0]

    def bw(out):
        def f():
            g = np.zeros_like(x.data)
            np.put_along_axis(g, k[:, None], out.grad[:, None], axis=1)
            x._accum(g)
        return f
    return _make(vals, (x,), bw), k


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(out):
        return lambda: x._accum(out.grad - p * out.grad.sum(axis=axis, keepdims=True))
    return _make(y, (x,), bw)


# ------------------------------------------------------------------ convolution

def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero padding on rows, circular padding on columns (azimuth wraps)."""
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    xp[:, :, ph:ph + H, pw:pw + W] = x
    if pw:
        xp[:, :, ph:ph + H, :pw] = x[..., W - pw:]
        xp[:, :, ph:ph + H, W + pw:] = x[..., :pw]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (O, C, kh, kw) kernels.

    Output is ``ceil(H / stride) x ceil(W / stride)``.  The padded batch is
    flattened to (C, B * Hp * Wp); kernel tap (i, j) then reads the contiguous
    slice starting at ``i * Wp + j``, so every tap is one matmul without an
    im2col buffer.  Positions that straddle a row or image edge land in the
    padding columns of the output and are discarded.
    """
    B, C, H, W = x.shape
    O, C2, kh, kw = weight.shape
    if C != C2:
        raise ValueError(f"input has {C} channels, kernel expects {C2}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel sizes must be odd")
    if kw // 2 > W:
        raise ValueError("kernel wider than the image")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ph, pw = kh // 2, kw // 2
    Hp, Wp = H + 2 * ph, W + 2 * pw
    N = B * Hp * Wp
    L = N - (kh - 1) * Wp - (kw - 1)
    X = _pad(x.data, ph, pw).transpose(1, 0, 2, 3).reshape(C, N)
    taps = [(i, j, i * Wp + j) for i in range(kh) for j in range(kw)]
    # contiguous (kh, kw, O, C) tap matrices keep matmul on the BLAS path
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
    wtT = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))

    Y = np.zeros((O, N))
    tmp = np.empty((O, L))
    for i, j, off in taps:
        np.matmul(wt[i, j], X[:, off:off + L], out=tmp)
        Y[:, :L] += tmp
    y = Y.reshape(O, B, Hp, Wp)[:, :, :H:stride, :W:stride].transpose(1, 0, 2, 3)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    else:
        y = np.ascontiguousarray(y)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(out):
        def f():
            G = np.zeros((O, B, Hp, Wp))
            G[:, :, :H:stride, :W:stride] = out.grad.transpose(1, 0, 2, 3)
            G = G.reshape(O, N)[:, :L]
            if bias is not None and bias.requires_grad:
                bias._accum(out.grad.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.empty((kh, kw, O, C))
                for i, j, off in taps:
                    np.matmul(G, X[:, off:off + L].T, out=gw[i, j])
                weight._accum(gw.transpose(2, 3, 0, 1))
            if x.requires_grad:
                gX = np.zeros((C, N))
                buf = np.empty((C, L))
                for i, j, off in taps:
                    np.matmul(wtT[i, j], G, out=buf)
                    gX[:, off:off + L] += buf
                gxp = gX.reshape(C, B, Hp, Wp).transpose(1, 0, 2, 3)
                gx = gxp[:, :, ph:ph + H, pw:pw + W].copy()
                if pw:
                    gx[..., :pw] += gxp[:, :, ph:ph + H, W + pw:]
                    gx[..., W - pw:] += gxp[:, :, ph:ph + H, :pw]
                x._accum(gx)
        return f
    return _make(y, parents, bw)
