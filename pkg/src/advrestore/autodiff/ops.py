"""Differentiable operations.

The op set is closed: elementwise arithmetic on equal shapes (plus
scalar-with-tensor), matmul, 2-D convolution and its transpose, channel
concatenation, SiLU/sigmoid, group normalization, nearest resampling, and the
reductions and losses the models need. Each op returns a new :class:`Tensor`
whose backward rule maps the upstream gradient to one gradient per input.
"""
import numpy as np

from . import kernels
from .tensor import Tensor, make_node


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ------------------------------------------------------------------ elementwise
def add(a, b):
    a, b = _t(a), _t(b)
    _same_shape("add", a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _t(a), _t(b)
    _same_shape("sub", a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _t(a), _t(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = _t(a)
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a, c):
    a = _t(a)
    return make_node(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def square(a):
    a = _t(a)
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def silu(x):
    x = _t(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * s

    def rule(g):
        return (g * (s + y * (1.0 - s)),)

    return make_node(y, (x,), rule, "silu")


def sigmoid(x):
    x = _t(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def clamp(x, lo, hi, straight_through=False):
    """Elementwise clamp to ``[lo, hi]`` (scalars or arrays of ``x``'s shape).

    With ``straight_through`` the backward pass treats the clamp as identity.
    """
    x = _t(x)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), x.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), x.shape)
    y = np.minimum(np.maximum(x.data, lo), hi)
    if straight_through:
        return make_node(y, (x,), lambda g: (g,), "clamp_st")
    inside = (x.data >= lo) & (x.data <= hi)
    return make_node(y, (x,), lambda g: (g * inside,), "clamp")


# -------------------------------------------------------------------- shaping
def reshape(x, shape):
    x = _t(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"reshape: cannot reshape {list(old)} to {list(shape)}") from exc
    return make_node(y, (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    x = _t(x)
    return reshape(x, (x.shape[0], -1))


def concat(tensors, axis=1):
    tensors = [_t(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(ref, t.shape)) if k != axis):
            raise ValueError(f"concat: shape mismatch {list(ref)} vs {list(t.shape)} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    y = np.concatenate([t.data for t in tensors], axis=axis)

    def rule(g):
        out = []
        for k in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[k], bounds[k + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return make_node(y, tuple(tensors), rule, "concat")


def upsample_nearest(x, factor=2):
    x = _t(x)
    f = int(factor)
    y = x.data.repeat(f, axis=2).repeat(f, axis=3)
    n, c, h, w = x.shape

    def rule(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return make_node(y, (x,), rule, "upsample_nearest")


def downsample_nearest(x, factor=2):
    """Keep the top-left pixel of every ``factor`` x ``factor`` block."""
    x = _t(x)
    f = int(factor)
    n, c, h, w = x.shape
    if h % f or w % f:
        raise ValueError(f"downsample_nearest: spatial shape {[h, w]} not divisible by {f}")
    y = x.data[:, :, ::f, ::f].copy()

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[:, :, ::f, ::f] = g
        return (gx,)

    return make_node(y, (x,), rule, "downsample_nearest")


# --------------------------------------------------------------- linear algebra
def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(x):
    x = _t(x)
    if x.ndim != 2:
        raise ValueError(f"transpose: expected a 2-D tensor, got shape {list(x.shape)}")
    return make_node(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def add_bias(x, b):
    """Add a per-channel bias.

    ``b`` has shape (C,) (shared across the batch) or (N, C) (per sample, used
    for time-embedding injection); it is broadcast over all trailing axes.
    """
    x, b = _t(x), _t(b)
    if b.ndim == 1 and x.ndim >= 2 and b.shape[0] == x.shape[1]:
        view = (1, -1) + (1,) * (x.ndim - 2)
        reduce_axes = (0,) + tuple(range(2, x.ndim))
    elif b.ndim == 2 and x.ndim >= 2 and b.shape == x.shape[:2]:
        view = b.shape + (1,) * (x.ndim - 2)
        reduce_axes = tuple(range(2, x.ndim))
    else:
        raise ValueError(f"add_bias: shape mismatch {list(x.shape)} vs {list(b.shape)}")
    y = x.data + b.data.reshape(view)

    def rule(g):
        gb = g.sum(axis=reduce_axes) if reduce_axes else g
        return g, gb.reshape(b.shape)

    return make_node(y, (x, b), rule, "add_bias")


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (F, C, kh, kw)."""
    x, w = _t(x), _t(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: shape mismatch {list(x.shape)} vs {list(w.shape)}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {[kh, kw]} too large for input {list(x.shape)}")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(f, -1)
    y = (wmat @ cols).reshape(f, n, oh, ow).transpose(1, 0, 2, 3)

    def rule(g):
        g = g.transpose(1, 0, 2, 3).reshape(f, n * oh * ow)
        gw = (g @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = kernels.col2im(wmat.T @ g, x.shape, kh, kw, stride, pad) if x.requires_grad else None
        return gx, gw

    return make_node(np.ascontiguousarray(y), (x, w), rule, "conv2d")


def conv_transpose2d(x, w, stride=1, pad=0):
    """Adjoint of :func:`conv2d`; ``w`` has shape (C_in, C_out, kh, kw)."""
    x, w = _t(x), _t(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d: shape mismatch {list(x.shape)} vs {list(w.shape)}")
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"conv_transpose2d: invalid output size for input {list(x.shape)}")
    wmat = w.data.reshape(cin, -1)
    xflat = x.data.transpose(1, 0, 2, 3).reshape(cin, n * h * wd)
    y = kernels.col2im(wmat.T @ xflat, (n, cout, oh, ow), kh, kw, stride, pad)

    def rule(g):
        gcols = kernels.im2col(g, kh, kw, stride, pad)
        gx = (wmat @ gcols).reshape(cin, n, h, wd).transpose(1, 0, 2, 3) if x.requires_grad else None
        gw = (xflat @ gcols.T).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    return make_node(y, (x, w), rule, "conv_transpose2d")


# ------------------------------------------------------------- normalization
def group_norm(x, gamma, beta, groups, eps=1e-5):
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    if x.ndim != 4 or x.shape[1] % groups or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(
            f"group_norm: shape mismatch {list(x.shape)} vs {list(gamma.shape)} with {groups} groups"
        )
    n, c, h, w = x.shape
    xr = x.data.reshape(n, groups, -1)
    mu = xr.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xr.var(axis=2, keepdims=True) + eps)
    xhat = ((xr - mu) * inv).reshape(x.shape)
    gview = gamma.data.reshape(1, c, 1, 1)
    y = xhat * gview + beta.data.reshape(1, c, 1, 1)

    def rule(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxh = (g * gview).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gxh - gxh.mean(axis=2, keepdims=True) - xh * (gxh * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return make_node(y, (x, gamma, beta), rule, "group_norm")


def l2_normalize(x):
    """Scale every row of a 2-D tensor to unit Euclidean norm."""
    x = _t(x)
    if x.ndim != 2:
        raise ValueError(f"l2_normalize: expected a 2-D batch of vectors, got shape {list(x.shape)}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("l2_normalize: cannot normalize a zero vector")
    y = x.data / norm

    def rule(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return make_node(y, (x,), rule, "l2_normalize")


# ------------------------------------------------------------------ reductions
def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    shape = x.shape
    if axis is None:
        return make_node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    y = x.data.sum(axis=axis)

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node(y, (x,), rule, "sum")


def mean(x):
    x = _t(x)
    n = x.data.size
    return scale(sum(x), 1.0 / n)


def mse(a, b):
    """Mean squared error between equal-shape tensors, as a scalar."""
    a, b = _t(a), _t(b)
    _same_shape("mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def rule(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return make_node(np.asarray((diff * diff).mean()), (a, b), rule, "mse")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``logits`` (N, K) against integer ``labels``."""
    logits = _t(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: shape mismatch {list(logits.shape)} vs {list(labels.shape)}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def rule(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return make_node(np.asarray(loss), (logits,), rule, "cross_entropy")
