"""Dense tensors with reverse-mode differentiation.

A Tensor wraps a contiguous row-major numpy array (float32 or float64). Results
of primitive ops remember their parents and a vector-Jacobian product; the
parent links form the compute graph that `backward` walks. Leaves flagged
``requires_grad`` are trainable, everything else is frozen and never receives
a gradient.

Image-shaped tensors are batched ``(B, C, H, W)``; the convolution and
resampling ops also take the unbatched ``(C, H, W)`` form.
"""
import contextlib
import threading
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, ShapeError, UnsupportedError

FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))
PAD_MODES = ("zero", "circular")

_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (current thread only); results are plain constants."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp = None

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __pow__(self, p): return power(self, p)


def parameter(data, name: str, trainable: bool = True, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=trainable, name=name)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Build a result tensor. ``vjp(g)`` returns one gradient (or None) per parent."""
    out = Tensor(data)
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# ---------- graph traversal ----------

def topological_order(output: Tensor) -> list:
    """Nodes reachable from ``output`` through grad-requiring edges, inputs first."""
    order, seen = [], set()
    stack = [(output, False)]
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


def backward(output: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """d output / d leaf for trainable leaves.

    With ``params`` the map covers every trainable entry of it (zeros when the
    output does not depend on it); without, every named trainable leaf reached.
    Frozen leaves never appear.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {id(output): np.ones_like(output.data)}
    reached = {}
    for node in reversed(topological_order(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                reached[id(node)] = (node, g)
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg

    if params is None:
        return {n.name: g for n, g in reached.values() if n.name is not None}
    out = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        hit = reached.get(id(p))
        out[name] = hit[1] if hit is not None else np.zeros_like(p.data)
    return out


# ---------- helpers ----------

def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    else:
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None
    return a, b


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------- elementwise arithmetic ----------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_node(out, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_node(x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return make_node(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    return make_node(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d,)
    return make_node(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype)
    return make_node(out, (x,), lambda g: (g * expit(x.data),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, x.ndim)
    e = np.exp(x.data - x.data.max(axis=ax, keepdims=True))
    s = e / e.sum(axis=ax, keepdims=True)
    return make_node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=ax, keepdims=True)),))


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Zero mean, unit variance along ``axis``; no affine part."""
    ax = _axis(axis, x.ndim)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=ax, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=ax, keepdims=True)
        gx = (g * xhat).mean(axis=ax, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return make_node(xhat, (x,), vjp)


def soft_threshold(z: Tensor, tau) -> Tensor:
    """sign(z) * max(0, |z| - tau), the proximal map of tau*||.||_1."""
    z = as_tensor(z)
    tau = as_tensor(tau, like=z)
    if np.any(tau.data < 0):
        raise ContractError("soft_threshold needs tau >= 0")
    z, tau = _pair(z, tau)
    sgn = np.sign(z.data)
    live = np.abs(z.data) > tau.data
    out = np.where(live, sgn * (np.abs(z.data) - tau.data), 0).astype(z.dtype)
    return make_node(out, (z, tau),
                     lambda g: (_unbroadcast(g * live, z.shape), _unbroadcast(-g * sgn * live, tau.shape)))


# ---------- reductions and shape ops ----------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return make_node(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def inner(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"inner product of {a.shape} and {b.shape}")
    return sum(mul(a, b))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"bad permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = _axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != s0 for i, (s, s0) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeError(f"cannot concat {t.shape} with {tensors[0].shape} on axis {ax}")
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                     lambda g: tuple(np.split(g, cuts, axis=ax)))


# ---------- resampling ----------

def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    f = int(factor)
    if f < 1:
        raise ShapeError("upsample factor must be >= 1")
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)

    def vjp(g):
        *lead, H, W = x.shape
        return (g.reshape(*lead, H, f, W, f).sum(axis=(-3, -1)),)
    return make_node(out, (x,), vjp)


def downsample_stride(x: Tensor, factor: int) -> Tensor:
    """Keep every ``factor``-th row/column, anchored top-left."""
    f = int(factor)
    if f < 1:
        raise ShapeError("downsample factor must be >= 1")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., ::f, ::f] = g
        return (gx,)
    return make_node(np.ascontiguousarray(x.data[..., ::f, ::f]), (x,), vjp)


def upsample_zero(x: Tensor, factor: int, out_hw: Optional[Tuple[int, int]] = None) -> Tensor:
    """Transpose of downsample_stride: scatter onto a zero grid of size ``out_hw``."""
    f = int(factor)
    *lead, h, w = x.shape
    H, W = out_hw if out_hw is not None else (h * f, w * f)
    if -(-H // f) != h or -(-W // f) != w:
        raise ShapeError(f"cannot zero-upsample {(h, w)} by {f} to {(H, W)}")
    out = np.zeros((*lead, H, W), dtype=x.dtype)
    out[..., ::f, ::f] = x.data
    return make_node(out, (x,), lambda g: (np.ascontiguousarray(g[..., ::f, ::f]),))


# ---------- linear algebra ----------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb
    return make_node(out, (a, b), vjp)


def _pad_matrix(n: int, p: int, mode: str, dtype) -> np.ndarray:
    """(n + 2p) x n selection matrix realising the 1-D padding."""
    idx = np.arange(n + 2 * p) - p
    P = np.zeros((n + 2 * p, n), dtype=dtype)
    if mode == "circular":
        P[np.arange(n + 2 * p), idx % n] = 1
    else:
        ok = (idx >= 0) & (idx < n)
        P[np.arange(n + 2 * p)[ok], idx[ok]] = 1
    return P


def pad2d(x: Tensor, p: int, mode: str = "zero") -> Tensor:
    if mode not in PAD_MODES:
        raise UnsupportedError(f"padding mode {mode!r} (expected one of {PAD_MODES})")
    if p == 0:
        return x
    np_mode = "wrap" if mode == "circular" else "constant"
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(x.data, width, mode=np_mode)
    H, W = x.shape[-2:]

    def vjp(g):
        Ph = _pad_matrix(H, p, mode, g.dtype)
        Pw = _pad_matrix(W, p, mode, g.dtype)
        return (np.einsum("ih,...ij,jw->...hw", Ph, g, Pw, optimize=True),)
    return make_node(out, (x,), vjp)


def _correlate_valid(xp: Tensor, w: Tensor) -> Tensor:
    k = w.shape[-1]
    win = sliding_window_view(xp.data, (k, k), axis=(2, 3))
    out = np.einsum("bchwij,ocij->bohw", win, w.data, optimize=True)
    H, W = out.shape[-2:]

    def vjp(g):
        gw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True) if w.requires_grad else None
        gx = None
        if xp.requires_grad:
            gx = np.zeros_like(xp.data)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + H, j:j + W] += np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True)
        return gx, gw
    return make_node(out, (xp, w), vjp)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, padding: str = "zero") -> Tensor:
    """Same-size 2-D cross-correlation, stride 1, odd square kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 4 or w.shape[-1] != w.shape[-2]:
        raise ShapeError(f"conv weight must be C_out x C_in x k x k, got {w.shape}")
    k = w.shape[-1]
    if k % 2 == 0:
        raise UnsupportedError(f"even kernel size {k}")
    if padding not in PAD_MODES:
        raise UnsupportedError(f"padding mode {padding!r}")
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv input {x.shape} does not match weight {w.shape}")
    out = _correlate_valid(pad2d(x, k // 2, padding), w)
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1)) if bias.ndim == 1 else bias)
    if single:
        out = reshape(out, out.shape[1:])
    return out
