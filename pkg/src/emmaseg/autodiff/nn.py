"""Differentiable volumetric layers.

Feature maps are channel-major: ``[C, D, H, W]`` for a single sample or
``[N, C, D, H, W]`` for a batch.  Every op accepts both layouts.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tensor import Tensor, as_tensor, make_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def channel_axis(ndim: int) -> int:
    return 1 if ndim == 5 else 0


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise DimensionError(f"expected a triple, got {v!r}")
    return t


def _as5d(x: np.ndarray) -> np.ndarray:
    if x.ndim == 5:
        return x
    if x.ndim == 4:
        return x[None]
    raise DimensionError(f"expected [C,D,H,W] or [N,C,D,H,W], got shape {x.shape}")


def _same_pads(kernel: tuple[int, int, int]) -> tuple[tuple[int, int], ...]:
    return tuple(((k - 1) // 2, k - 1 - (k - 1) // 2) for k in kernel)


def conv_output_extents(extents, kernel, stride=1, padding: str = "valid") -> tuple[int, ...]:
    kernel, stride = _triple(kernel), _triple(stride)
    out = []
    for n, k, s in zip(extents, kernel, stride):
        if padding == "zero_same":
            n = n + k - 1
        elif padding != "valid":
            raise DimensionError(f"unknown padding mode {padding!r}")
        if k > n:
            raise DimensionError(f"kernel extent {k} exceeds (padded) input extent {n}")
        out.append((n - k) // s + 1)
    return tuple(out)


def conv3d(x: Tensor, kernel: Tensor, stride=1, padding: str = "valid") -> Tensor:
    """3D cross-correlation of ``x`` with ``kernel[C_out, C_in, kd, kh, kw]``."""
    kernel = as_tensor(kernel, like=x)
    xd = _as5d(x.data)
    w = kernel.data
    if w.ndim != 5:
        raise DimensionError(f"kernel must be [C_out,C_in,kd,kh,kw], got {w.shape}")
    if xd.shape[1] != w.shape[1]:
        raise DimensionError(
            f"input has {xd.shape[1]} channels but kernel expects C_in={w.shape[1]}")
    stride = _triple(stride)
    if min(stride) < 1:
        raise DimensionError(f"stride components must be >= 1, got {stride}")
    ksize = w.shape[2:]
    out_ext = conv_output_extents(xd.shape[2:], ksize, stride, padding)
    pads = _same_pads(ksize) if padding == "zero_same" else ((0, 0),) * 3
    xp = np.pad(xd, ((0, 0), (0, 0)) + pads) if padding == "zero_same" else xd
    Do, Ho, Wo = out_ext
    sd, sh, sw = stride

    def window(i, j, l):
        return (slice(None), slice(None),
                slice(i, i + sd * (Do - 1) + 1, sd),
                slice(j, j + sh * (Ho - 1) + 1, sh),
                slice(l, l + sw * (Wo - 1) + 1, sw))

    offsets = list(itertools.product(*(range(k) for k in ksize)))
    acc = np.zeros((w.shape[0], xd.shape[0], Do, Ho, Wo), dtype=np.result_type(xd, w))
    for i, j, l in offsets:
        acc += np.tensordot(w[:, :, i, j, l], xp[window(i, j, l)], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))
    if x.ndim == 4:
        out = out[0]

    def bw(g):
        g5 = _as5d(g)
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w) if kernel.requires_grad else None
        for i, j, l in offsets:
            idx = window(i, j, l)
            if gw is not None:
                gw[:, :, i, j, l] = np.tensordot(g5, xp[idx], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            if gx is not None:
                gx[idx] += np.tensordot(w[:, :, i, j, l], g5, axes=([0], [1])).transpose(1, 0, 2, 3, 4)
        if gx is not None:
            if padding == "zero_same":
                gx = gx[(slice(None), slice(None)) + tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, xd.shape[2:]))]
            gx = gx.reshape(x.shape)
        return gx, gw

    return make_op(out, (x, kernel), bw)


def max_pool3d(x: Tensor, window=2, stride=None) -> Tensor:
    """Max over sliding windows; ties route the gradient to the first voxel in scan order."""
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    xd = _as5d(x.data)
    for n, k in zip(xd.shape[2:], window):
        if k > n:
            raise DimensionError(f"pool window {window} larger than input extents {xd.shape[2:]}")
    views = sliding_window_view(xd, window, axis=(2, 3, 4))
    views = views[:, :, ::stride[0], ::stride[1], ::stride[2]]
    flat = views.reshape(views.shape[:5] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    Do, Ho, Wo = out.shape[2:]
    if x.ndim == 4:
        out = out[0]

    def bw(g):
        g5 = _as5d(g)
        gx = np.zeros_like(xd)
        for f, (a, b, c) in enumerate(itertools.product(*(range(k) for k in window))):
            idx = (slice(None), slice(None),
                   slice(a, a + stride[0] * (Do - 1) + 1, stride[0]),
                   slice(b, b + stride[1] * (Ho - 1) + 1, stride[1]),
                   slice(c, c + stride[2] * (Wo - 1) + 1, stride[2]))
            gx[idx] += np.where(arg == f, g5, 0)
        return (gx.reshape(x.shape),)

    return make_op(np.ascontiguousarray(out), (x,), bw)


def _blocks(shape: tuple[int, ...], factor: int) -> tuple[int, ...]:
    lead = shape[:-3]
    D, H, W = shape[-3:]
    return lead + (D // factor, factor, H // factor, factor, W // factor, factor)


def downsample_average(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor**3`` blocks."""
    factor = int(factor)
    if factor < 1 or any(n % factor for n in x.shape[-3:]):
        raise DimensionError(f"spatial extents {x.shape[-3:]} not divisible by factor {factor}")
    axes = (-5, -3, -1)
    out = x.data.reshape(_blocks(x.shape, factor)).mean(axis=axes)
    scale = 1.0 / factor ** 3

    def bw(g):
        gx = np.broadcast_to(np.expand_dims(g * scale, axes), _blocks(x.shape, factor))
        return (np.ascontiguousarray(gx).reshape(x.shape).astype(x.dtype, copy=False),)

    return make_op(out.astype(x.dtype, copy=False), (x,), bw)


def _linear_weights(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample(x: Tensor, factor: int, mode: str = "repeat") -> Tensor:
    """Enlarge spatial extents by ``factor`` (voxel repetition or trilinear)."""
    factor = int(factor)
    if factor < 1:
        raise DimensionError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return make_op(x.data, (x,), lambda g: (g,))
    shape = x.shape
    if mode == "repeat":
        out_shape = shape[:-3] + tuple(n * factor for n in shape[-3:])
        expanded = np.broadcast_to(np.expand_dims(x.data, (-5, -3, -1)), _blocks(out_shape, factor))
        out = np.ascontiguousarray(expanded).reshape(out_shape)

        def bw(g):
            return (g.reshape(_blocks(g.shape, factor)).sum(axis=(-5, -3, -1)),)

        return make_op(out, (x,), bw)
    if mode != "trilinear":
        raise DimensionError(f"unknown upsample mode {mode!r}")
    mats = [_linear_weights(n, factor).astype(x.dtype) for n in shape[-3:]]
    nd = x.ndim

    def apply(arr, matrices):
        for k, m in enumerate(matrices):
            ax = nd - 3 + k
            arr = np.moveaxis(np.tensordot(m, arr, axes=([1], [ax])), 0, ax)
        return np.ascontiguousarray(arr)

    out = apply(x.data, mats)
    return make_op(out, (x,), lambda g: (apply(g, [m.T for m in mats]),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None,
               running_var: np.ndarray | None, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation over batch and spatial axes, then affine.

    In training mode ``running_mean``/``running_var`` are updated in place as
    ``r <- momentum * r + (1 - momentum) * batch_stat``.
    """
    ca = channel_axis(x.ndim)
    C = x.shape[ca]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"gamma/beta must have length {C}, got {gamma.shape}, {beta.shape}")
    axes = tuple(i for i in range(x.ndim) if i != ca)
    count = x.size // C
    if count == 0:
        raise DimensionError("batch_norm over an empty spatial volume")
    bshape = [1] * x.ndim
    bshape[ca] = C
    bshape = tuple(bshape)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
        if running_var is not None:
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        mu = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = inv_std.reshape(bshape) / count * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), bw)


def softmax_channels(x: Tensor) -> Tensor:
    ca = channel_axis(x.ndim)
    z = x.data - x.data.max(axis=ca, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ca, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ca, keepdims=True)),)

    return make_op(s, (x,), bw)


def _check_spatial(tensors) -> None:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[-3:] != ref[-3:] or (t.ndim == 5 and t.shape[0] != ref[0]):
            raise DimensionError(f"spatial extents differ: {ref} vs {t.shape}")


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    _check_spatial(tensors)
    ca = channel_axis(tensors[0].ndim)
    sizes = [t.shape[ca] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ca)

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ca] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return make_op(out, tensors, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two feature maps of identical shape."""
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def crop_center(x: Tensor, extents) -> Tensor:
    """Central spatial crop to ``extents``."""
    extents = _triple(extents)
    src = x.shape[-3:]
    if any(e > s for e, s in zip(extents, src)):
        raise DimensionError(f"cannot crop {src} to larger extents {extents}")
    if tuple(src) == extents:
        return x
    index = (Ellipsis,) + tuple(slice((s - e) // 2, (s - e) // 2 + e) for s, e in zip(src, extents))

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_op(x.data[index], (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,))
