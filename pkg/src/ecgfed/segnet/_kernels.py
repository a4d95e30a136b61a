"""Numba kernels for the memory-bound parts of a training step.

Each kernel has a numpy twin in :mod:`ecgfed.segnet.layers`; the test suite
checks that both agree.  Loops run in a fixed order, so results are
deterministic.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def im2col3x3(x):
    c, n, h, w = x.shape
    cols = np.zeros((9 * c, n * h * w))
    for k in range(9):
        oy = k // 3 - 1
        ox = k % 3 - 1
        for ci in range(c):
            row = k * c + ci
            for ni in range(n):
                for y in range(h):
                    sy = y + oy
                    if sy < 0 or sy >= h:
                        continue
                    base = (ni * h + y) * w
                    for xx in range(w):
                        sx = xx + ox
                        if 0 <= sx < w:
                            cols[row, base + xx] = x[ci, ni, sy, sx]
    return cols


@njit(cache=True)
def col2im3x3(dcols, c, n, h, w):
    dx = np.zeros((c, n, h, w))
    for k in range(9):
        oy = k // 3 - 1
        ox = k % 3 - 1
        for ci in range(c):
            row = k * c + ci
            for ni in range(n):
                for y in range(h):
                    sy = y + oy
                    if sy < 0 or sy >= h:
                        continue
                    base = (ni * h + y) * w
                    for xx in range(w):
                        sx = xx + ox
                        if 0 <= sx < w:
                            dx[ci, ni, sy, sx] += dcols[row, base + xx]
    return dx


@njit(cache=True)
def norm_silu_fwd(x, gamma, beta, eps):
    """Instance norm + affine + SiLU; returns (y, xhat, inv, sig)."""
    c, n, h, w = x.shape
    m = h * w
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    sig = np.empty_like(x)
    inv = np.empty((c, n))
    for ci in range(c):
        g = gamma[ci]
        b = beta[ci]
        for ni in range(n):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[ci, ni, i, j]
            mu = s / m
            v = 0.0
            for i in range(h):
                for j in range(w):
                    d = x[ci, ni, i, j] - mu
                    v += d * d
            iv = 1.0 / math.sqrt(v / m + eps)
            inv[ci, ni] = iv
            for i in range(h):
                for j in range(w):
                    xh = (x[ci, ni, i, j] - mu) * iv
                    xhat[ci, ni, i, j] = xh
                    z = g * xh + b
                    if z >= 0:
                        sg = 1.0 / (1.0 + math.exp(-z))
                    else:
                        ez = math.exp(z)
                        sg = ez / (1.0 + ez)
                    sig[ci, ni, i, j] = sg
                    y[ci, ni, i, j] = z * sg
    return y, xhat, inv, sig


@njit(cache=True)
def norm_silu_bwd(dy, xhat, inv, sig, gamma, beta):
    """Backward of :func:`norm_silu_fwd`; returns (dx, dgamma, dbeta)."""
    c, n, h, w = dy.shape
    m = h * w
    dx = np.empty_like(dy)
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for ci in range(c):
        g = gamma[ci]
        b = beta[ci]
        for ni in range(n):
            s1 = 0.0
            s2 = 0.0
            for i in range(h):
                for j in range(w):
                    xh = xhat[ci, ni, i, j]
                    sg = sig[ci, ni, i, j]
                    z = g * xh + b
                    dz = dy[ci, ni, i, j] * sg * (1.0 + z * (1.0 - sg))
                    dgamma[ci] += dz * xh
                    dbeta[ci] += dz
                    dxh = dz * g
                    dx[ci, ni, i, j] = dxh
                    s1 += dxh
                    s2 += dxh * xh
            f = inv[ci, ni] / m
            for i in range(h):
                for j in range(w):
                    dx[ci, ni, i, j] = f * (m * dx[ci, ni, i, j] - s1 - xhat[ci, ni, i, j] * s2)
    return dx, dgamma, dbeta
