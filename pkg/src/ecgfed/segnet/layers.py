"""Channels-first layer primitives with explicit backward passes.

Activations are ``(C, N, H, W)`` float64 so that every convolution is a
single ``(Cout, K) @ (K, N*H*W)`` product.  Each ``*_fwd`` returns the output
and a cache; the matching ``*_bwd`` consumes the upstream gradient and the
cache.

The im2col/col2im pair and the fused norm+SiLU block run as numba kernels
when numba is importable and ``ECGFED_NO_NUMBA`` is unset; the ``*_np``
functions are the reference implementations.
"""
from __future__ import annotations

import os

import numpy as np
from scipy.special import expit

try:
    if os.environ.get("ECGFED_NO_NUMBA"):
        raise ImportError
    from . import _kernels as _K
except ImportError:  # pragma: no cover - exercised only without numba
    _K = None

_TAPS = [(dy, dx) for dy in range(3) for dx in range(3)]


def im2col3x3(x: np.ndarray) -> np.ndarray:
    if _K is not None:
        return _K.im2col3x3(np.ascontiguousarray(x))
    return im2col3x3_np(x)


def col2im3x3(dcols: np.ndarray, shape) -> np.ndarray:
    if _K is not None:
        c, n, h, w = shape
        return _K.col2im3x3(np.ascontiguousarray(dcols), c, n, h, w)
    return col2im3x3_np(dcols, shape)


def im2col3x3_np(x: np.ndarray) -> np.ndarray:
    """``(C, N, H, W)`` -> ``(9*C, N*H*W)``, zero padding, tap-major rows."""
    c, n, h, w = x.shape
    cols = np.zeros((9, c, n, h, w))
    for k, (dy, dx) in enumerate(_TAPS):
        oy, ox = dy - 1, dx - 1
        ys, yd = slice(max(oy, 0), h + min(oy, 0)), slice(max(-oy, 0), h + min(-oy, 0))
        xs, xd = slice(max(ox, 0), w + min(ox, 0)), slice(max(-ox, 0), w + min(-ox, 0))
        cols[k, :, :, yd, xd] = x[:, :, ys, xs]
    return cols.reshape(9 * c, n * h * w)


def col2im3x3_np(dcols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`im2col3x3`."""
    c, n, h, w = shape
    d = dcols.reshape(9, c, n, h, w)
    dx = np.zeros(shape)
    for k, (dy, ddx) in enumerate(_TAPS):
        oy, ox = dy - 1, ddx - 1
        ys, yd = slice(max(oy, 0), h + min(oy, 0)), slice(max(-oy, 0), h + min(-oy, 0))
        xs, xd = slice(max(ox, 0), w + min(ox, 0)), slice(max(-ox, 0), w + min(-ox, 0))
        dx[:, :, ys, xs] += d[k, :, :, yd, xd]
    return dx


def conv3x3_fwd(x: np.ndarray, wmat: np.ndarray):
    """Same-padded 3x3 convolution; ``wmat`` is ``(Cout, 9*Cin)``."""
    c, n, h, w = x.shape
    cols = im2col3x3(x)
    y = (wmat @ cols).reshape(-1, n, h, w)
    return y, (cols, x.shape)


def conv3x3_bwd(dy: np.ndarray, wmat: np.ndarray, cache, need_dx: bool = True):
    cols, shape = cache
    dyf = dy.reshape(dy.shape[0], -1)
    dw = dyf @ cols.T
    if not need_dx:
        return None, dw
    return col2im3x3(wmat.T @ dyf, shape), dw


def conv1x1_fwd(x, wmat, bias=None):
    """Pointwise convolution; ``wmat`` is ``(Cout, Cin)``."""
    c, n, h, w = x.shape
    y = wmat @ x.reshape(c, -1)
    if bias is not None:
        y += bias[:, None]
    return y.reshape(-1, n, h, w), x


def conv1x1_bwd(dy, wmat, cache):
    x = cache
    dyf = dy.reshape(dy.shape[0], -1)
    dw = dyf @ x.reshape(x.shape[0], -1).T
    db = dyf.sum(axis=1)
    dx = (wmat.T @ dyf).reshape(x.shape)
    return dx, dw, db


def instnorm_fwd(x, gamma, beta, eps):
    """Per-(channel, sample) normalization over the spatial axes."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma[:, None, None, None] + beta[:, None, None, None], (xhat, inv)


def instnorm_bwd(dy, gamma, cache):
    xhat, inv = cache
    m = xhat.shape[2] * xhat.shape[3]
    dgamma = np.sum(dy * xhat, axis=(1, 2, 3))
    dbeta = np.sum(dy, axis=(1, 2, 3))
    dxhat = dy * gamma[:, None, None, None]
    s1 = dxhat.sum(axis=(2, 3), keepdims=True)
    s2 = np.sum(dxhat * xhat, axis=(2, 3), keepdims=True)
    dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def silu_fwd(x):
    s = expit(x)
    return x * s, (x, s)


def silu_bwd(dy, cache):
    x, s = cache
    return dy * (s * (1.0 + x * (1.0 - s)))


def avgpool2_fwd(x):
    c, n, h, w = x.shape
    return x.reshape(c, n, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_bwd(dy):
    return np.repeat(np.repeat(0.25 * dy, 2, axis=2), 2, axis=3)


def upsample2_fwd(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_bwd(dy):
    c, n, h, w = dy.shape
    return dy.reshape(c, n, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def norm_silu_fwd_np(x, gamma, beta, eps):
    z, (xhat, inv) = instnorm_fwd(x, gamma, beta, eps)
    y, (_, sig) = silu_fwd(z)
    return y, (xhat, inv[:, :, 0, 0], sig)


def norm_silu_bwd_np(dy, gamma, beta, cache):
    xhat, inv, sig = cache
    z = xhat * gamma[:, None, None, None] + beta[:, None, None, None]
    dz = silu_bwd(dy, (z, sig))
    return instnorm_bwd(dz, gamma, (xhat, inv[:, :, None, None]))


def norm_silu_fwd(x, gamma, beta, eps):
    """Instance norm, per-channel affine, then SiLU."""
    if _K is not None:
        y, xhat, inv, sig = _K.norm_silu_fwd(np.ascontiguousarray(x), gamma, beta, eps)
        return y, (xhat, inv, sig)
    return norm_silu_fwd_np(x, gamma, beta, eps)


def norm_silu_bwd(dy, gamma, beta, cache):
    if _K is not None:
        xhat, inv, sig = cache
        return _K.norm_silu_bwd(np.ascontiguousarray(dy), xhat, inv, sig, gamma, beta)
    return norm_silu_bwd_np(dy, gamma, beta, cache)
