"""Minimal dense-tensor engine with reverse-mode differentiation.

The operator set is closed: exactly the operations the segmentation
network needs (3D convolution, group norm, pointwise activations, 2x max
pooling, 2x trilinear upsampling, elementwise add/mul, channel concat,
and a scalar sum), plus Adam. Each executed operation records its parents
and a sequence number; backward replays the record in exact reverse
execution order, accumulating into .grad.

Tensors are NCDHW: (batch, channels, depth, height, width). Compute dtype
follows the input arrays; float32 for training, float64 for gradient
verification.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from . import _kernels
from .errors import ConfigError, RankError, ShapeError

_SEQ = itertools.count()
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _Node:
    """One executed operation: parents plus a backward closure."""

    __slots__ = ("parents", "backward_fn", "seq")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.grad is not None})"


def _make_output(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._op is not None for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._op = _Node(parents, backward_fn)
    return out


def _accumulate(t: Tensor, grad: np.ndarray):
    if t.grad is None:
        g = np.asarray(grad, dtype=t.data.dtype)
        # own the buffer: views would pin their base and alias siblings
        t.grad = g.copy() if g.base is not None else g
    else:
        t.grad += grad


def backward(loss: Tensor):
    """Reverse sweep from a scalar loss, populating .grad on leaves.

    Nodes are visited in exact reverse execution order; gradients
    accumulate (+=) when a tensor feeds several operations. Saved
    activations are released as the sweep consumes them.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._op is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return

    nodes: list[Tensor] = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._op is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._op.parents)
    nodes.sort(key=lambda t: t._op.seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        node, g = t._op, t.grad
        if g is None:
            continue
        for parent, pgrad in zip(node.parents, node.backward_fn(g)):
            if pgrad is None:
                continue
            if parent.requires_grad or parent._op is not None:
                _accumulate(parent, pgrad)
        t._op = None  # free saved activations
        if not t.requires_grad:
            t.grad = None


# ---------------------------------------------------------------------------
# convolution

def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """Cross-correlate a 5D input with a cubic odd kernel plus bias.

    padding defaults to (k-1)//2 ("same" spatial size at stride 1).
    """
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d input must be (N,C,D,H,W), got {x.shape}")
    if w.data.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError(f"conv3d kernel must be (Cout,Cin,k,k,k), got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {w.shape[1]} input channels, input has shape {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    if padding is None:
        padding = (k - 1) // 2
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")

    N, Cin, D, H, W = x.shape
    Cout = w.shape[0]
    out_spatial = tuple((s + 2 * padding - k) // stride + 1 for s in (D, H, W))
    if any(s < 1 for s in out_spatial):
        raise ShapeError(f"kernel {k} with padding {padding} does not fit input {x.shape}")

    xd, wd = x.data, w.data
    if k == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride, ::stride]
        wm = wd.reshape(Cout, Cin)
        out = np.einsum("ncdhw,oc->nodhw", xs, wm, optimize=True)
        mode = "pointwise"
        xp = None
    else:
        pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3
        xp = np.pad(xd, pad)
        if stride == 1 and out_spatial[2] >= _kernels.ROW_KERNEL_MIN_WIDTH:
            out = np.zeros((N, Cout) + out_spatial, dtype=xd.dtype)
            _kernels.conv3d_forward(xp, wd, out)
            mode = "row"
        else:
            out = _kernels.im2col_forward(xp, wd, stride, out_spatial)
            mode = "im2col"
    if b is not None:
        out += b.data.reshape(1, Cout, 1, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(go):
        go = np.ascontiguousarray(go)
        gb = go.sum(axis=(0, 2, 3, 4)) if b is not None else None
        if mode == "pointwise":
            wm = wd.reshape(Cout, Cin)
            gxs = np.einsum("nodhw,oc->ncdhw", go, wm, optimize=True)
            if stride == 1:
                gx = gxs
            else:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride, ::stride] = gxs
            xs = xd[:, :, ::stride, ::stride, ::stride]
            gw = np.einsum("nodhw,ncdhw->oc", go, xs, optimize=True).reshape(wd.shape)
        else:
            if mode == "row":
                gxp = np.zeros_like(xp)
                gw = np.zeros_like(wd)
                _kernels.conv3d_grad_input(go, wd, gxp)
                _kernels.conv3d_grad_weight(go, xp, gw)
            else:
                gxp, gw = _kernels.im2col_backward(go, xp, wd, stride)
            if padding:
                gx = gxp[:, :, padding:-padding, padding:-padding, padding:-padding]
            else:
                gx = gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(gb)
        return grads

    return _make_output(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# normalization

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize over channel groups within each sample, then scale/shift."""
    if x.data.ndim != 5:
        raise ShapeError(f"group_norm input must be (N,C,D,H,W), got {x.shape}")
    N, C = x.shape[:2]
    if C % groups != 0:
        raise ConfigError(f"channels {C} not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")

    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * inv_std
    xhat = xhat_g.reshape(x.shape)
    gb = gamma.data.reshape(1, C, 1, 1, 1)
    out = xhat * gb + beta.data.reshape(1, C, 1, 1, 1)

    def backward_fn(go):
        dgamma = (go * xhat).sum(axis=(0, 2, 3, 4))
        dbeta = go.sum(axis=(0, 2, 3, 4))
        dxhat = (go * gb).reshape(N, groups, -1)
        mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat_g).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - mean_dxhat - xhat_g * mean_dxhat_xhat)
        return [dx.reshape(x.shape), dgamma, dbeta]

    return _make_output(out, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------------------
# pointwise activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.data.dtype)

    def backward_fn(go):
        return [np.where(mask, go, 0.0)]

    return _make_output(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, numerically stable on both tails."""
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(go):
        return [go * out * (1.0 - out)]

    return _make_output(out, (x,), backward_fn)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis; outputs sum to 1 per voxel."""
    if x.data.ndim < 2:
        raise ShapeError(f"softmax_channels needs a channel axis, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(go):
        dot = (go * out).sum(axis=1, keepdims=True)
        return [out * (go - dot)]

    return _make_output(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# resampling

def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling with stride 2; gradient goes to the first argmax."""
    N, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise ShapeError(f"maxpool3d needs even spatial dims, got {x.shape}")
    Do, Ho, Wo = D // 2, H // 2, W // 2
    windows = (
        x.data.reshape(N, C, Do, 2, Ho, 2, Wo, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(N, C, Do, Ho, Wo, 8)
    )
    idx = windows.argmax(axis=-1)  # first index wins ties
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(go):
        gwin = np.zeros((N, C, Do, Ho, Wo, 8), dtype=go.dtype)
        np.put_along_axis(gwin, idx[..., None], go[..., None], axis=-1)
        gx = (
            gwin.reshape(N, C, Do, Ho, Wo, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(N, C, D, H, W)
        )
        return [gx]

    return _make_output(out, (x,), backward_fn)


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    left = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    right = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.25 * left + 0.75 * a
    out[..., 1::2] = 0.75 * a + 0.25 * right
    return np.moveaxis(out, -1, axis)


def _upsample_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge = g[..., 0::2]
    godd = g[..., 1::2]
    gx = 0.75 * (ge + godd)
    gx[..., 0] += 0.25 * ge[..., 0]
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., -1] += 0.25 * godd[..., -1]
    gx[..., 1:] += 0.25 * godd[..., :-1]
    return np.moveaxis(gx, -1, axis)


def upsample_trilinear(x: Tensor) -> Tensor:
    """Double each spatial axis by linear interpolation (align_corners=False)."""
    if x.data.ndim != 5:
        raise ShapeError(f"upsample input must be (N,C,D,H,W), got {x.shape}")
    out = x.data
    for axis in (2, 3, 4):
        out = _upsample_axis(out, axis)

    def backward_fn(go):
        g = go
        for axis in (4, 3, 2):
            g = _upsample_axis_adjoint(g, axis)
        return [g]

    return _make_output(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# elementwise and structural

def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad over axes the operand broadcast along."""
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def elementwise_add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add shapes differ: {x.shape} vs {y.shape}")
    out = x.data + y.data

    def backward_fn(go):
        return [go, go]

    return _make_output(out, (x, y), backward_fn)


def elementwise_mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product; a 1-channel operand broadcasts over channels."""
    if x.data.ndim != y.data.ndim:
        raise ShapeError(f"mul ranks differ: {x.shape} vs {y.shape}")
    for a, (sx, sy) in enumerate(zip(x.shape, y.shape)):
        if sx != sy and 1 not in (sx, sy):
            raise ShapeError(f"mul shapes incompatible at axis {a}: {x.shape} vs {y.shape}")
    out = x.data * y.data

    def backward_fn(go):
        return [
            _unbroadcast(go * y.data, x.shape),
            _unbroadcast(go * x.data, y.shape),
        ]

    return _make_output(out, (x, y), backward_fn)


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise ShapeError(f"concat shapes differ outside channels: {x.shape} vs {y.shape}")
    out = np.concatenate([x.data, y.data], axis=1)
    cx = x.shape[1]

    def backward_fn(go):
        return [go[:, :cx], go[:, cx:]]

    return _make_output(out, (x, y), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward_fn(go):
        return [np.full(x.shape, 1.0, dtype=x.data.dtype) * go]

    return _make_output(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None):
        """One update from the gradients currently stored on the params."""
        if lr is None:
            lr = self.lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= np.asarray(lr * update, dtype=p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
