"""Differentiable primitives.

Every function takes tensors (or array-likes, treated as constants) and
returns a new ``Tensor``. Backward closures return one gradient array per
parent, already reduced to the parent's shape.

Broadcasting follows numpy; gradients of broadcast operands are summed back
over the expanded axes by :func:`unbroadcast`.
"""

from __future__ import annotations

import builtins
import math

import numpy as np
from scipy import special

from .core import NonFiniteError, ShapeError, Tensor, as_tensor, make_result


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        gb = b.data
        return unbroadcast(g / gb, a.shape), unbroadcast(-g * out / gb, b.shape)

    return make_result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return make_result(out, (a,), bw, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def maximum(a, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient flows where ``a > floor``."""
    a = as_tensor(a)
    keep = a.data > floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.dtype))
    return make_result(out, (a,), lambda g: (g * keep,), "maximum")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)
    out = a.data * s

    def bw(g):
        return (g * (s * (1 + a.data * (1 - s))),)

    return make_result(out, (a,), bw, "silu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def normal_cdf(a) -> Tensor:
    """Standard normal CDF."""
    a = as_tensor(a)
    out = special.ndtr(a.data).astype(a.dtype, copy=False)
    pdf = np.exp(-0.5 * a.data * a.data) / math.sqrt(2 * math.pi)
    return make_result(out, (a,), lambda g: (g * pdf,), "normal_cdf")


def detach(a) -> Tensor:
    """Stop-gradient: same values, no graph edge."""
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data[index])

    items = index if isinstance(index, tuple) else (index,)
    advanced = builtins.any(isinstance(i, (list, np.ndarray)) for i in items)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_result(out, (a,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(ts))
        )

    return make_result(out, ts, bw, "concat")


def roll(a, shifts, axes) -> Tensor:
    a = as_tensor(a)
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = np.roll(a.data, shifts, axis=axes)
    neg_shifts = tuple(-s for s in shifts)
    return make_result(out, (a,), lambda g: (np.roll(g, neg_shifts, axis=axes),), "roll")


def _spatial_axes(ndim, factor, axes):
    if axes is None:
        return tuple(range(ndim - len(factor), ndim))
    axes = tuple(ax % ndim for ax in axes)
    if len(axes) != len(factor):
        raise ShapeError("one factor per axis is required")
    return axes


def upsample_nearest(a, factor, axes=None) -> Tensor:
    """Repeat each voxel ``factor[i]`` times along ``axes[i]`` (default: trailing axes)."""
    a = as_tensor(a)
    factor = tuple(int(f) for f in factor)
    axes = _spatial_axes(a.ndim, factor, axes)
    out = a.data
    for ax, f in zip(axes, factor):
        out = np.repeat(out, f, axis=ax)
    fmap = dict(zip(axes, factor))

    def bw(g):
        shape = []
        sum_axes = []
        for i, e in enumerate(a.shape):
            shape.append(e)
            if i in fmap:
                shape.append(fmap[i])
                sum_axes.append(len(shape) - 1)
        return (g.reshape(shape).sum(axis=tuple(sum_axes)),)

    return make_result(np.ascontiguousarray(out), (a,), bw, "upsample_nearest")


def downsample_nearest(a, factor, axes=None) -> Tensor:
    """Keep every ``factor[i]``-th voxel along ``axes[i]`` (default: trailing axes)."""
    a = as_tensor(a)
    factor = tuple(int(f) for f in factor)
    axes = _spatial_axes(a.ndim, factor, axes)
    index = [slice(None)] * a.ndim
    for ax, f in zip(axes, factor):
        index[ax] = slice(None, None, f)
    return getitem(a, tuple(index))


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(out, (a, b), bw, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw, "softmax")


def standardize(a, axis=-1, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit (population) variance over ``axis``."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(a.dtype, copy=False)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_result(xhat, (a,), bw, "standardize")


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5, channels_last: bool = False) -> Tensor:
    """Per-(sample, group) standardization followed by a per-channel affine."""
    x = as_tensor(x)
    C = x.shape[-1] if channels_last else x.shape[1]
    if C % groups:
        raise ShapeError(f"channels ({C}) not divisible by groups ({groups})")
    B = x.shape[0]
    if channels_last:
        h = standardize(x.reshape(B, -1, groups, C // groups), axis=(1, 3), eps=eps).reshape(x.shape)
        return h * gamma + beta
    h = standardize(x.reshape(B, groups, -1), axis=-1, eps=eps).reshape(x.shape)
    affine = (1, C) + (1,) * (x.ndim - 2)
    return h * reshape(gamma, affine) + reshape(beta, affine)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis, then scale and shift."""
    return standardize(x, -1, eps) * gamma + beta


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected three values, got {v}")
    return v


def _conv_geometry(spatial, k, stride, padding):
    padded = tuple(s + 2 * p for s, p in zip(spatial, padding))
    if builtins.any(kk > pp for kk, pp in zip(k, padded)):
        raise ShapeError(f"conv3d kernel {k} larger than padded input {padded}")
    return tuple((pp - kk) // st + 1 for pp, kk, st in zip(padded, k, stride))


def _correlate_cl(xp: np.ndarray, wt: np.ndarray, stride, out_sp) -> np.ndarray:
    """Raw channels-last correlation of padded ``xp`` with ``wt[kd,kh,kw,C,F]``."""
    B, C = xp.shape[0], xp.shape[-1]
    F = wt.shape[-1]
    Do, Ho, Wo = out_sp
    sd, sh, sw = stride
    out = np.zeros((B * Do * Ho * Wo, F), dtype=np.result_type(xp, wt))
    for a in range(wt.shape[0]):
        for b in range(wt.shape[1]):
            for c in range(wt.shape[2]):
                win = xp[:, a:a + sd * (Do - 1) + 1:sd, b:b + sh * (Ho - 1) + 1:sh, c:c + sw * (Wo - 1) + 1:sw]
                out += win.reshape(-1, C) @ wt[a, b, c]
    return out.reshape((B,) + tuple(out_sp) + (F,))


def _pad_cl(x: np.ndarray, padding) -> np.ndarray:
    if not builtins.any(padding):
        return x
    return np.pad(x, ((0, 0),) + tuple((p, p) for p in padding) + ((0, 0),))


def conv3d_cl(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """Channels-last 3D cross-correlation.

    ``x`` is [B, D, H, W, C]; ``kernel`` keeps the [F, C, kd, kh, kw] layout.
    Computed as a sum over kernel offsets of (voxels x C) @ (C x F) products,
    in a fixed offset order.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and kernel, got {x.shape} and {kernel.shape}")
    B, C = x.shape[0], x.shape[-1]
    F, Ck = kernel.shape[:2]
    if C != Ck:
        raise ShapeError(f"conv3d channel mismatch: input has {C}, kernel expects {Ck}")
    k = kernel.shape[2:]
    stride, padding = _triple(stride), _triple(padding)
    out_sp = _conv_geometry(x.shape[1:4], k, stride, padding)
    xp = _pad_cl(x.data, padding)
    wt = np.ascontiguousarray(kernel.data.transpose(2, 3, 4, 1, 0))  # kd,kh,kw,C,F
    out = _correlate_cl(xp, wt, stride, out_sp)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)
    Do, Ho, Wo = out_sp
    sd, sh, sw = stride

    def window(arr, a, b, c):
        return arr[:, a:a + sd * (Do - 1) + 1:sd, b:b + sh * (Ho - 1) + 1:sh, c:c + sw * (Wo - 1) + 1:sw]

    def bw(g):
        g2 = g.reshape(-1, F)
        grads = [None, None]
        if x.requires_grad:
            if stride == (1, 1, 1):
                # transposed correlation: flipped kernel with C and F swapped
                wflip = np.ascontiguousarray(wt[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
                back_pad = tuple(kk - 1 - p for kk, p in zip(k, padding))
                grads[0] = _correlate_cl(_pad_cl(g, back_pad), wflip, stride, x.shape[1:4])
            else:
                dx = np.zeros(xp.shape, dtype=g.dtype)
                for a in range(k[0]):
                    for b in range(k[1]):
                        for c in range(k[2]):
                            window(dx, a, b, c)[...] += (g2 @ wt[a, b, c].T).reshape(B, Do, Ho, Wo, C)
                pd, ph, pw = padding
                grads[0] = np.ascontiguousarray(dx[:, pd:pd + x.shape[1], ph:ph + x.shape[2], pw:pw + x.shape[3]])
        if kernel.requires_grad:
            dwt = np.empty_like(wt)
            for a in range(k[0]):
                for b in range(k[1]):
                    for c in range(k[2]):
                        dwt[a, b, c] = window(xp, a, b, c).reshape(-1, C).T @ g2
            grads[1] = np.ascontiguousarray(dwt.transpose(4, 3, 0, 1, 2))
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_result(out, parents, bw, "conv3d")


def conv3d(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x[B,C,D,H,W]`` with ``kernel[F,C,kd,kh,kw]``.

    Output extents are ``(in + 2*pad - k) // stride + 1`` per axis.
    """
    x = as_tensor(x)
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input, got {x.shape}")
    y = conv3d_cl(transpose(x, (0, 2, 3, 4, 1)), kernel, bias, stride, padding)
    return transpose(y, (0, 4, 1, 2, 3))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is [in, out]."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def mae(a, b) -> Tensor:
    return mean(abs(sub(a, b)))
