"""A small dense-tensor runtime with reverse-mode autodiff.

Values are float64 numpy arrays.  Every op returns a new :class:`Tensor` that
remembers its parents and a closure mapping the upstream gradient to one
gradient per parent.  :func:`backward` walks the graph once in reverse
topological order.

Broadcasting between two tensors is restricted to identical shapes or a
scalar operand; use :func:`expand` to broadcast explicitly.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import GradientError, ShapeError

_grad_enabled = True
_rounding_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def ste_surrogate():
    """Evaluate every rounding as the identity.

    The resulting network is the function whose exact gradient the
    straight-through rules compute, which makes it the finite-difference
    oracle for those rules.
    """
    global _rounding_enabled
    prev = _rounding_enabled
    _rounding_enabled = False
    try:
        yield
    finally:
        _rounding_enabled = prev


def rounding_enabled() -> bool:
    return _rounding_enabled


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    Returns a mapping leaf -> gradient array.  ``root`` must be a scalar.
    """
    if root.data.size != 1:
        raise GradientError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
    return leaves


# ---------------------------------------------------------------------------
# elementwise and reductions


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.data.size == 1 and a.ndim == 0 or b.data.size == 1 and b.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match", axes=("lhs", "rhs"))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "mul_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes) if axes else 1
    return mul_scalar(sum_(x, axes, keepdims), 1.0 / n)


def l2_norm(x: Tensor, axis=1) -> Tensor:
    """Euclidean norm over ``axis`` (the channel axis by default)."""
    out = np.sqrt((x.data * x.data).sum(axis=axis))

    def bw(g):
        denom = np.expand_dims(out, axis)
        safe = np.where(denom > 0, denom, 1.0)
        return (np.where(denom > 0, x.data / safe, 0.0) * np.expand_dims(g, axis),)

    return _make(out, (x,), bw, "l2_norm")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}", axes=("all",)) from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def expand(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"expand: {x.shape} does not broadcast to {shape}", axes=("all",)) from exc
    lead = len(shape) - x.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (x,), bw, "expand")


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis=1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ShapeError(f"concat: {tuple(ref)} vs {tuple(other)} off axis {axis}", axes=("non-concat",))
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def shift_channels(x: Tensor, offsets) -> Tensor:
    """Add a constant per-channel offset to an NCHW tensor (mean shift)."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if x.ndim != 4 or offsets.shape != (x.shape[1],):
        raise ShapeError(f"shift_channels: {offsets.shape} offsets for input {x.shape}", axes=("C",))
    return _make(x.data + offsets[None, :, None, None], (x,), lambda g: (g,), "shift_channels")


def ste_round(x: Tensor) -> Tensor:
    """Round half away from zero; gradient passes straight through."""
    out = kernels.round_half_away(x.data) if _rounding_enabled else x.data.copy()
    return _make(out, (x,), lambda g: (g,), "ste_round")


# ---------------------------------------------------------------------------
# image ops


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW x OIHW convolution (cross-correlation) via patch-matrix expansion."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}", axes=("ndim",))
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeError(f"conv2d: input channels C={c} != weight I={i}", axes=("input.C", "weight.I"))
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} padding={padding}", axes=("stride", "padding"))
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded input {h}x{wd} smaller than kernel {kh}x{kw}", axes=("H", "W"))
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({o},)", axes=("bias.O",))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wm = w.data.reshape(o, -1)
    out = np.matmul(wm, cols).reshape(n, o, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gm = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(wm.T, gm), x.shape, kh, kw, stride, padding)
        if w.requires_grad:
            gw = np.einsum("nol,nkl->ok", gm, cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=(0, 2))
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r)."""
    n, crr, h, w = x.shape
    if r < 1 or crr % (r * r):
        raise ShapeError(f"pixel_shuffle: {crr} channels not divisible by r^2={r * r}", axes=("C",))
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bw(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return _make(out, (x,), bw, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, hr, wr = x.shape
    if r < 1 or hr % r or wr % r:
        raise ShapeError(f"pixel_unshuffle: {hr}x{wr} not divisible by r={r}", axes=("H", "W"))
    h, w = hr // r, wr // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def bw(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return _make(out, (x,), bw, "pixel_unshuffle")


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used (and differentiated through);
    the running buffers are updated in place unless ``update_stats`` is off.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm2d: input {x.shape} vs {gamma.shape[0]} channels", axes=("C",))
    c = x.shape[1]
    gd, bd = gamma.data.reshape(1, c, 1, 1), beta.data.reshape(1, c, 1, 1)
    if training:
        m = x.data.size // c
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        if update_stats:
            unbiased = var.reshape(c) * (m / max(m - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased

        def bw(g):
            dxhat = g * gd
            sx = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sxx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv / m * (m * dxhat - sx - xhat * sxx)
            return (gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv

        def bw(g):
            return (g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _make(gd * xhat + bd, (x, gamma, beta), bw, "batch_norm2d")


__all__ = [
    "Tensor", "as_tensor", "parameter", "backward", "no_grad", "ste_surrogate", "rounding_enabled",
    "add", "sub", "mul", "div", "mul_scalar", "relu", "sigmoid", "abs_", "square", "sqrt",
    "sum_", "mean", "l2_norm", "reshape", "expand", "getitem", "concat", "shift_channels",
    "ste_round", "conv2d", "pixel_shuffle", "pixel_unshuffle", "batch_norm2d",
]
