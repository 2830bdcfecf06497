"""Reverse-mode automatic differentiation over numpy arrays.

A forward pass builds a DAG of `Tensor` nodes; `backward` walks it in
reverse topological order and accumulates gradients into every node that
requires them. Only the primitives this package actually needs are
implemented; each one has a closed-form vector-Jacobian product that is
verified against central finite differences (see gradcheck).

Dtype policy: ops preserve the dtype of their inputs. Training runs in
float32; gradient-vs-finite-difference verification runs the same graph in
float64.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class NoGraph(Exception):
    """Raised when backward is requested but no graph was recorded."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Tensor, grad=None) -> None:
    """Backpropagate from `root`, accumulating into .grad of graph nodes."""
    if not root.requires_grad:
        raise NoGraph("tensor has no recorded computation graph")
    if grad is None:
        grad = np.ones_like(root.data)
    root.grad = grad if root.grad is None else root.grad + grad

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    for node in reversed(topo):
        g = node.grad
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is not None and parent.requires_grad:
                parent.grad = pg if parent.grad is None else parent.grad + pg
        if node._parents and node is not root:
            node.grad = None  # free intermediate gradients


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

# Python int/float operands stay raw scalars: wrapping them in float64
# arrays would silently upcast float32 graphs (NumPy treats 0-d arrays as
# strongly typed), and they never need gradients anyway.


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float))


def add(a, b) -> Tensor:
    if _is_scalar(b) or _is_scalar(a):
        t, s = (a, b) if _is_scalar(b) else (b, a)
        t = as_tensor(t)
        return _make(t.data + s, (t,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data - b, (a,), lambda g: (g,))
    if _is_scalar(a):
        b = as_tensor(b)
        return _make(a - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if _is_scalar(b) or _is_scalar(a):
        t, s = (a, b) if _is_scalar(b) else (b, a)
        t = as_tensor(t)
        return _make(t.data * s, (t,), lambda g: (g * s,))
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), bwd)


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    if _is_scalar(a):
        b = as_tensor(b)
        data = a / b.data

        def bwd_s(g):
            return (-g * data / b.data,)

        return _make(data, (b,), bwd_s)
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * data / b.data, b.data.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * (0.5 / data),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def absolute(a) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    data = 0.5 * x * (1.0 + th)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * ((1.0 - th * th) * dinner)),)

    return _make(data, (a,), bwd)


def arccos(a) -> Tensor:
    """arccos with a floored derivative denominator near the endpoints."""
    a = as_tensor(a)
    data = np.arccos(np.clip(a.data, -1.0, 1.0))

    def bwd(g):
        denom = np.sqrt(np.maximum(1.0 - a.data**2, 1e-24))
        return (-g / denom,)

    return _make(data, (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; zero gradient outside the open interval (lo, hi)."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return _make(data, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / data.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / n,)

    return _make(data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.data.shape),)
    )


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make(data, parts, bwd)


def stack(parts, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    data = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(data, parts, bwd)


def cast(a, dtype) -> Tensor:
    a = as_tensor(a)
    dtype = np.dtype(dtype)
    src = a.data.dtype
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    data = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def linear(x, w, b) -> Tensor:
    """Fused affine map x @ w + b (bias broadcast over leading axes)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    data = x.data @ w.data + b.data

    def bwd(g):
        gx = g @ w.data.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.data.shape[-1]).T @ g2
        return gx, gw, g2.sum(axis=0)

    return _make(data, (x, w, b), bwd)


def fourier_features(x, angular_freqs: np.ndarray) -> Tensor:
    """Per-element [x, sin(f1 x), cos(f1 x), ...] blocks along the last axis.

    `angular_freqs` is a constant [K] array (already scaled by pi); input
    (..., d) maps to (..., d * (2K + 1)).
    """
    x = as_tensor(x)
    freqs = np.asarray(angular_freqs)
    k = freqs.shape[0]
    ang = x.data[..., None] * freqs
    sins, coss = np.sin(ang), np.cos(ang)
    block = np.empty(x.data.shape + (2 * k + 1,), dtype=x.data.dtype)
    block[..., 0] = x.data
    block[..., 1::2] = sins
    block[..., 2::2] = coss
    data = block.reshape(x.data.shape[:-1] + (x.data.shape[-1] * (2 * k + 1),))

    def bwd(g):
        gb = g.reshape(x.data.shape + (2 * k + 1,))
        gx = gb[..., 0] + ((gb[..., 1::2] * coss - gb[..., 2::2] * sins) * freqs).sum(axis=-1)
        return (gx,)

    return _make(data, (x,), bwd)


def matinv(a) -> Tensor:
    a = as_tensor(a)
    data = np.linalg.inv(a.data)

    def bwd(g):
        yt = data.swapaxes(-1, -2)
        return (-yt @ g @ yt,)

    return _make(data, (a,), bwd)


def cross(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.cross(a.data, b.data)

    def bwd(g):
        ga = _unbroadcast(np.cross(b.data, g), a.data.shape)
        gb = _unbroadcast(np.cross(g, a.data), b.data.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def svd_rotation(a) -> Tensor:
    """Project a 3x3 matrix onto SO(3): R = U V^T from the SVD U S V^T.

    A det(UV^T) == -1 result flips the last column of U so the output is a
    proper rotation. The gradient follows the polar-factor differential with
    the sign-adjusted singular values; near-degenerate inputs are rejected
    because the gradient would blow up.
    """
    a = as_tensor(a)
    if a.data.shape != (3, 3):
        raise ValueError("svd_rotation expects a single 3x3 matrix")
    u, s, vh = np.linalg.svd(a.data)
    s = s.copy()
    if np.linalg.det(u @ vh) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        s[-1] = -s[-1]
    if np.abs(s).min() < 1e-12:
        raise ValueError("svd_rotation input is numerically singular")
    denom = s[:, None] + s[None, :]
    off = ~np.eye(3, dtype=bool)
    if np.abs(denom[off]).min() < 1e-9:
        raise ValueError("svd_rotation gradient is ill-conditioned (repeated singular values)")
    data = u @ vh

    def bwd(g):
        gp = u.T @ g @ vh.T
        phi = (gp - gp.T) / np.where(off, denom, 1.0)
        phi[~off] = 0.0
        return (u @ phi @ vh,)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _make(y, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply a learned affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        gxh = g * gain.data
        gx = inv * (
            gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        ggain = _unbroadcast((g * xhat).sum(axis=axes), gain.data.shape)
        gbias = _unbroadcast(g.sum(axis=axes), bias.data.shape)
        return gx, ggain, gbias

    return _make(data, (x, gain, bias), bwd)


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution, NHWC layout, weights (kh, kw, cin, cout)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    batch, h, wid, cin = x.data.shape
    kh, kw, wcin, cout = w.data.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, ho, wo, cin, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(batch * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    data = (cols @ wmat + b.data).reshape(batch, ho, wo, cout)

    def bwd(g):
        gm = g.reshape(batch * ho * wo, cout)
        gw = (cols.T @ gm).reshape(w.data.shape)
        gb = gm.sum(axis=0)
        gcols = (gm @ wmat.T).reshape(batch, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += gcols[
                    :, :, :, ki, kj
                ]
        if padding:
            gx = gxp[:, padding:-padding, padding:-padding]
        else:
            gx = gxp
        return gx, gw, gb

    return _make(data, (x, w, b), bwd)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling with stride 2 (even spatial dims required)."""
    x = as_tensor(x)
    batch, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("maxpool2x2 requires even spatial dimensions")
    win = (
        x.data.reshape(batch, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(batch, h // 2, w // 2, c, 4)
    )
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = (
            gwin.reshape(batch, h // 2, w // 2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(batch, h, w, c)
        )
        return (gx,)

    return _make(data, (x,), bwd)
