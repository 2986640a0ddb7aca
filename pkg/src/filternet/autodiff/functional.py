"""
Differentiable layer primitives on 5-D arrays laid out as (batch, channel, x, y, z).

Convolutions are cross-correlations (no kernel flip).  Each op checks its
preconditions and raises ConfigurationError on mismatched shapes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError
from .tensor import Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _triple(v) -> tuple:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigurationError(f"expected three values, got {v!r}")
    return t


def conv_output_size(dim: int, k: int, p: int, s: int) -> int:
    return (dim + 2 * p - k) // s + 1


# ---------------------------------------------------------------------------
# 3-D convolution


def _pad_channels_last(x: np.ndarray, padding: tuple) -> np.ndarray:
    """(N,C,X,Y,Z) -> zero-padded (N,X',Y',Z',C)."""
    n, c, X, Y, Z = x.shape
    px, py, pz = padding
    xp = np.zeros((n, X + 2 * px, Y + 2 * py, Z + 2 * pz, c), dtype=x.dtype)
    xp[:, px:px + X, py:py + Y, pz:pz + Z, :] = np.moveaxis(x, 1, -1)
    return xp


def _offset_slice(i: int, j: int, k: int, out_shape: tuple, stride: tuple):
    (ox, oy, oz), (sx, sy, sz) = out_shape, stride
    return (slice(None), slice(i, i + sx * (ox - 1) + 1, sx), slice(j, j + sy * (oy - 1) + 1, sy),
            slice(k, k + sz * (oz - 1) + 1, sz), slice(None))


# Below this input width the per-offset matmuls degenerate into outer products,
# so kernel planes are unrolled im2col-style instead.
_NARROW_INPUT = 4


def _plane_columns(xp: np.ndarray, i: int, kshape: tuple, out_shape: tuple,
                   stride: tuple) -> np.ndarray:
    """im2col rows for kernel plane ``i``: (N*ox*oy*oz, Ci*ky*kz)."""
    kx, ky, kz = kshape
    sx, sy, sz = stride
    win = sliding_window_view(xp, (kx, ky, kz), axis=(1, 2, 3))[:, ::sx, ::sy, ::sz]
    win = win[:, :out_shape[0], :out_shape[1], :out_shape[2]]
    return np.ascontiguousarray(win[..., i, :, :]).reshape(-1, xp.shape[-1] * ky * kz)


def _correlate_cl(xp: np.ndarray, w: np.ndarray, out_shape: tuple, stride: tuple) -> np.ndarray:
    """Channels-last cross-correlation of padded ``xp`` (N,X,Y,Z,Ci) with w (Co,Ci,k,k,k)."""
    co, ci = w.shape[:2]
    kshape = w.shape[2:]
    acc = np.zeros((xp.shape[0],) + tuple(out_shape) + (co,), dtype=np.result_type(xp, w))
    if ci < _NARROW_INPUT:
        flat = acc.reshape(-1, co)
        for i in range(kshape[0]):
            flat += _plane_columns(xp, i, kshape, out_shape, stride) @ w[:, :, i].reshape(co, -1).T
        return acc
    wt = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0))  # kx,ky,kz,Ci,Co
    for i, j, k in np.ndindex(*kshape):
        acc += xp[_offset_slice(i, j, k, out_shape, stride)] @ wt[i, j, k]
    return acc


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           padding=None, stride=1) -> Tensor:
    """3-D cross-correlation with zero padding.

    ``padding`` defaults to (k - 1) // 2 per axis, which preserves the spatial
    size for odd kernels at stride 1.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ConfigurationError(f"conv3d expects 5-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(
            f"conv3d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    kshape = weight.shape[2:]
    padding = tuple((k - 1) // 2 for k in kshape) if padding is None else _triple(padding)
    stride = _triple(stride)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"conv3d: bias shape {bias.shape} != ({weight.shape[0]},)")
    out_shape = tuple(conv_output_size(d, k, p, s)
                      for d, k, p, s in zip(x.shape[2:], kshape, padding, stride))
    if min(out_shape) < 1:
        raise ConfigurationError(f"conv3d: kernel {kshape} does not fit input {x.shape[2:]}")

    xp = _pad_channels_last(x.data, padding)
    acc = _correlate_cl(xp, weight.data, out_shape, stride)
    if bias is not None:
        acc += bias.data
    out = np.ascontiguousarray(np.moveaxis(acc, -1, 1))
    del acc
    co, ci = weight.shape[:2]

    def backward(g):
        gx = gw = gb = None
        gt = np.ascontiguousarray(np.moveaxis(g, 1, -1))
        if x.requires_grad:
            wt = np.ascontiguousarray(weight.data.transpose(2, 3, 4, 0, 1))  # kx,ky,kz,Co,Ci
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for i, j, k in np.ndindex(*kshape):
                gp[_offset_slice(i, j, k, out_shape, stride)] += gt @ wt[i, j, k]
            px, py, pz = padding
            X, Y, Z = x.shape[2:]
            gx = np.ascontiguousarray(np.moveaxis(gp[:, px:px + X, py:py + Y, pz:pz + Z, :], -1, 1))
        if weight.requires_grad:
            g2 = gt.reshape(-1, co)
            gw = np.empty(weight.shape, dtype=g.dtype)
            if ci < _NARROW_INPUT:
                for i in range(kshape[0]):
                    cols = _plane_columns(xp, i, kshape, out_shape, stride)
                    gw[:, :, i] = (g2.T @ cols).reshape(co, ci, kshape[1], kshape[2])
            else:
                for i, j, k in np.ndindex(*kshape):
                    cols = xp[_offset_slice(i, j, k, out_shape, stride)].reshape(-1, ci)
                    gw[:, :, i, j, k] = g2.T @ cols
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv3d")


# ---------------------------------------------------------------------------
# 2-D kernel applied to every x-y slice


def conv2d_slicewise(x: Tensor, kernel: Tensor, padding: int) -> Tensor:
    """Correlate every x-y plane (axes -3, -2) of ``x`` with a square 2-D kernel.

    The leading axes (batch, channel) and the trailing z axis are carried
    through unchanged; zero padding of ``padding`` voxels is applied in-plane.
    """
    kernel = as_tensor(kernel, x.dtype)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ConfigurationError(f"slice kernel must be square, got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigurationError(f"slice kernel size must be odd, got {k}")
    if x.ndim < 3:
        raise ConfigurationError("conv2d_slicewise needs at least (x, y, z) axes")
    p = int(padding)
    lead = x.ndim - 3
    pad = [(0, 0)] * lead + [(p, p), (p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    ox = xp.shape[-3] - k + 1
    oy = xp.shape[-2] - k + 1
    if ox < 1 or oy < 1:
        raise ConfigurationError("slice kernel larger than padded slice")
    K = kernel.data
    out = np.zeros(x.shape[:-3] + (ox, oy, x.shape[-1]), dtype=np.result_type(x.data, K))
    for u in range(k):
        for v in range(k):
            if K[u, v] != 0.0:
                out += K[u, v] * xp[..., u:u + ox, v:v + oy, :]

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for u in range(k):
                for v in range(k):
                    if K[u, v] != 0.0:
                        gp[..., u:u + ox, v:v + oy, :] += K[u, v] * g
            gx = gp[..., p:p + x.shape[-3], p:p + x.shape[-2], :]
        if kernel.requires_grad:
            gk = np.empty_like(K)
            for u in range(k):
                for v in range(k):
                    gk[u, v] = np.vdot(g, xp[..., u:u + ox, v:v + oy, :])
        return gx, gk

    return make_result(out, (x, kernel), backward, "conv2d_slicewise")


# ---------------------------------------------------------------------------
# resampling


def maxpool3d(x: Tensor, window=(2, 2, 2)) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first element."""
    a, b, c = _triple(window)
    n, ch, X, Y, Z = x.shape
    if X % a or Y % b or Z % c:
        raise ConfigurationError(f"maxpool3d: spatial dims {x.shape[2:]} not divisible by {(a, b, c)}")
    blocks = (x.data.reshape(n, ch, X // a, a, Y // b, b, Z // c, c)
              .transpose(0, 1, 2, 4, 6, 3, 5, 7)
              .reshape(n, ch, X // a, Y // b, Z // c, a * b * c))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(n, ch, X // a, Y // b, Z // c, a, b, c)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7)
              .reshape(x.shape))
        return (gx,)

    return make_result(out, (x,), backward, "maxpool3d")


def upsample_nn(x: Tensor, factor=(2, 2, 2)) -> Tensor:
    """Nearest-neighbour replication along the three spatial axes."""
    a, b, c = _triple(factor)
    out = x.data.repeat(a, axis=2).repeat(b, axis=3).repeat(c, axis=4)
    n, ch, X, Y, Z = x.shape

    def backward(g):
        return (g.reshape(n, ch, X, a, Y, b, Z, c).sum(axis=(3, 5, 7)),)

    return make_result(out, (x,), backward, "upsample_nn")


# ---------------------------------------------------------------------------
# normalization and activations


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (batch, x, y, z).

    In training mode the running statistics are updated in place
    (unbiased variance, as in the usual deep-learning convention).
    """
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ConfigurationError(f"batch_norm: state for {gamma.shape[0]} channels, input has {ch}")
    axes = (0, 2, 3, 4)
    bshape = (1, ch, 1, 1, 1)
    if training:
        m = x.size // ch
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                m = x.size // ch
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gbeta

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                       lambda g: (g * mask,), "relu")


def softmax_channels(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax over the channel axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        rest = list(t.shape)
        ref = list(tensors[0].shape)
        rest[axis] = ref[axis] = 0
        if rest != ref:
            raise ConfigurationError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tensors, backward, "concat")


def add_same_shape(a: Tensor, b: Tensor) -> Tensor:
    """Residual addition; unlike ``+`` it refuses to broadcast."""
    if a.shape != b.shape:
        raise ConfigurationError(f"residual add: shape {a.shape} != {b.shape}")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "residual_add")
