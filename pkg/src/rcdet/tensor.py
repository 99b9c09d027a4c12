"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is deliberately small: it covers exactly what the
connection algebra, the factor pipeline, and the detection harness need.
Tensors follow the (batch, channels, height, width) layout; most ops also
accept the unbatched (channels, height, width) form where noted.

Every tensor construction validates finiteness: a NaN or Inf anywhere is
raised as :class:`NonFiniteError` instead of propagating silently.

A computation graph is confined to one thread.  Tensors that are not part
of a graph (``requires_grad=False``, no node) are immutable by convention
and safe to share across threads.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """A tensor value is NaN or Inf (contract violation, never silent)."""


class GraphError(RuntimeError):
    """Invalid use of the autodiff tape (non-scalar loss, reused tape, ...)."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / analysis)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class TapeNode:
    """One executed operation: parent tensors plus the rule that maps the
    output gradient onto parent gradients.  Creation order is topological
    by construction (parents always exist before children)."""

    __slots__ = ("parents", "grad_fn", "consumed")

    def __init__(self, parents: tuple["Tensor", ...], grad_fn: Callable):
        self.parents = parents
        self.grad_fn = grad_fn
        self.consumed = False


class Tensor:
    """A dense float64 array, optionally attached to an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _node: Optional[TapeNode] = None):
        arr = np.asarray(data, dtype=np.float64)
        # cheap screen first: any NaN/Inf entry makes the sum non-finite.
        # (the converse can fail on overflow, hence the full recheck)
        if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NonFiniteError(
                f"tensor {name or '<unnamed>'} contains NaN/Inf (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = _node
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, severed from the graph."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; scalars go through scale/affine
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return affine(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{grad})"


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable,
            name: Optional[str] = None) -> Tensor:
    """Wrap an op output, recording a tape node only when a parent needs it."""
    if _grad_enabled() and any(p.requires_grad for p in parents):
        node = TapeNode(tuple(parents), grad_fn)
        return Tensor(data, requires_grad=True, name=name, _node=node)
    return Tensor(data, requires_grad=False, name=name)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Accumulates gradients into ``.grad`` of every ``requires_grad`` tensor
    reachable from ``loss``.  Each tape node may be swept once; a second
    backward over any part of the same forward graph raises
    :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise GraphError("loss is not attached to a graph")

    # iterative post-order: children after parents
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                stack.append((p, False))

    for t in order:
        if t.node is not None and t.node.consumed:
            raise GraphError("tape already consumed; run a fresh forward pass "
                             "before calling backward again")

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        node = t.node
        if node is None:
            continue
        node.consumed = True
        parent_grads = node.grad_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = flowing.get(id(p))
            flowing[id(p)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _result(a.data * k, (a,), lambda g: (g * k,))


def affine(a: Tensor, k: float, c: float) -> Tensor:
    """k*a + c elementwise with scalar k, c."""
    k, c = float(k), float(c)
    return _result(a.data * k + c, (a,), lambda g: (g * k,))


def pow_const(a: Tensor, p: float) -> Tensor:
    """a**p elementwise; caller guarantees the domain (used on (0,1) values)."""
    p = float(p)
    ad = a.data
    out = ad ** p
    return _result(out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at exactly 0 is 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed overflow-free."""
    ad = a.data
    out = np.logaddexp(0.0, ad)
    sig = np.empty_like(ad)
    pos = ad >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    sig[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * sig,))


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber: 0.5*a^2 inside |a|<=delta, linear outside."""
    d = float(delta)
    ad = a.data
    absa = np.abs(ad)
    out = np.where(absa <= d, 0.5 * ad * ad, d * (absa - 0.5 * d))
    grad = np.clip(ad, -d, d)
    return _result(out, (a,), lambda g: (g * grad,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy() if g.shape != shape else g,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def softmax(v: Tensor) -> Tensor:
    """Softmax over a 1-D vector; output sums to 1."""
    if v.ndim != 1:
        raise ValueError(f"softmax expects a 1-D vector, got shape {v.shape}")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def grad_fn(g):
        dot = float((g * out).sum())
        return (out * (g - dot),)

    return _result(out, (v,), grad_fn)


def batch_norm_infer(x: Tensor, mean, var, eps: float = 1e-5) -> Tensor:
    """Inference-mode normalization with fixed per-channel statistics."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if x.ndim == 4:
        m = mean[None, :, None, None]
        s = 1.0 / np.sqrt(var[None, :, None, None] + eps)
    elif x.ndim == 3:
        m = mean[:, None, None]
        s = 1.0 / np.sqrt(var[:, None, None] + eps)
    else:
        raise ValueError(f"batch_norm_infer expects 3-D or 4-D input, got {x.shape}")
    return _result((x.data - m) * s, (x,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (shape (C,)) to an NCHW / CHW tensor."""
    if b.ndim != 1:
        raise ValueError(f"bias must be 1-D, got shape {b.shape}")
    if x.ndim == 4:
        c_axis, bview = 1, b.data[None, :, None, None]
        reduce_axes = (0, 2, 3)
    elif x.ndim == 3:
        c_axis, bview = 0, b.data[:, None, None]
        reduce_axes = (1, 2)
    else:
        raise ValueError(f"add_bias expects 3-D or 4-D input, got {x.shape}")
    if x.shape[c_axis] != b.shape[0]:
        raise ValueError(f"bias length {b.shape[0]} != channels {x.shape[c_axis]}")
    return _result(x.data + bview, (x, b),
                   lambda g: (g, g.sum(axis=reduce_axes)))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation.  x: (N,C,H,W), w: (Cout,Cin,kh,kw), b: (Cout,).

    Output spatial dims are floor((H + 2*pad - k)/stride) + 1.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W) input, got shape {x.shape}")
    n, c, h, wdt = x.shape
    c_out, c_in, kh, kw = w.shape
    if c != c_in:
        raise ValueError(f"conv2d: input channels {c} != kernel channels {c_in}")
    hp, wp = h + 2 * pad, wdt + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, oh, ow, kh, kw)
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    out = (col @ wmat.T).reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    need_x = x.requires_grad  # leaf inputs (images) skip the col2im fold
    wdata = w.data

    def grad_fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, c_out)
        gw = (gmat.T @ col).reshape(w.shape)
        gx = None
        if need_x:
            # accumulate channels-last so the inner axis stays contiguous
            gxp = np.zeros((n, hp, wp, c))
            for i in range(kh):
                for j in range(kw):
                    contrib = (gmat @ wdata[:, :, i, j]).reshape(n, oh, ow, c)
                    gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += contrib
            if pad:
                gxp = gxp[:, pad:pad + h, pad:pad + wdt, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, grad_fn)


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear sampling matrix, align-corners=false."""
    r = np.zeros((n_out, n_in))
    scale_f = n_in / n_out
    coords = (np.arange(n_out) + 0.5) * scale_f - 0.5
    lo = np.floor(coords).astype(int)
    frac = coords - lo
    hi = np.clip(lo + 1, 0, n_in - 1)
    lo = np.clip(lo, 0, n_in - 1)
    for d in range(n_out):
        r[d, lo[d]] += 1.0 - frac[d]
        r[d, hi[d]] += frac[d]
    return r


_resize_cache: dict[tuple[int, int], np.ndarray] = {}


def _resize_mat(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    m = _resize_cache.get(key)
    if m is None:
        m = _resize_matrix(n_in, n_out)
        _resize_cache[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of the trailing two axes (align-corners=false)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output {out_h}x{out_w} must be >= 1x1")
    if x.ndim < 2:
        raise ValueError(f"bilinear_resize expects >= 2-D input, got shape {x.shape}")
    h, wdt = x.shape[-2], x.shape[-1]
    if h == out_h and wdt == out_w:
        # same-size resize is the identity
        return _result(x.data, (x,), lambda g: (g,))
    ry = _resize_mat(h, out_h)       # (out_h, h)
    rx = _resize_mat(wdt, out_w)     # (out_w, w)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def grad_fn(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _result(out, (x,), grad_fn)


def channel_max(x: Tensor) -> Tensor:
    """Max across the channel axis: (...,C,H,W) -> (...,1,H,W).

    The subgradient routes to the first (lowest-index) argmax channel.
    """
    if x.ndim not in (3, 4):
        raise ValueError(f"channel_max expects 3-D or 4-D input, got shape {x.shape}")
    axis = x.ndim - 3
    out = x.data.max(axis=axis, keepdims=True)
    am = x.data.argmax(axis=axis)  # first max wins ties

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(am, axis), g, axis)
        return (gx,)

    return _result(out, (x,), grad_fn)
