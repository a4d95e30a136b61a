"""Deterministic image primitives shared by the renderer and the digitizer.

Images are 2-D ``float64`` arrays indexed ``[row, col]`` with intensities in
[0, 1] (1 = white paper).  Masks are 2-D ``bool`` arrays of the same shape.
All functions are pure: they never modify their inputs.
"""
from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np
from scipy import fft, ndimage

from .rng import gaussian, make_rng

# JPEG Annex K luminance quantization table.
JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

GRID_PEAK_FRACTION = 0.2


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    return img


def robust_normalize(img, lo_pct: float = 0.01, hi_pct: float = 0.99) -> np.ndarray:
    """Percentile contrast clipping to [0, 1].

    Values at or below the ``lo_pct`` quantile map to 0, at or above the
    ``hi_pct`` quantile to 1, linearly in between.  A degenerate range
    (constant image) yields an all-0.5 image.
    """
    if not 0.0 <= lo_pct < hi_pct <= 1.0:
        raise ValueError("need 0 <= lo_pct < hi_pct <= 1")
    img = as_image(img)
    lo, hi = np.quantile(img, [lo_pct, hi_pct])
    if not hi > lo:
        return np.full(img.shape, 0.5)
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0)


def _bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill: float) -> np.ndarray:
    h, w = img.shape
    padded = np.pad(img, 1, mode="constant", constant_values=fill)
    px = sx + 1.0
    py = sy + 1.0
    outside = (px < 0) | (py < 0) | (px > w + 1) | (py > h + 1)
    px = np.clip(px, 0.0, w + 1)
    py = np.clip(py, 0.0, h + 1)
    x0 = np.minimum(np.floor(px).astype(np.intp), w)
    y0 = np.minimum(np.floor(py).astype(np.intp), h)
    fx = px - x0
    fy = py - y0
    top = padded[y0, x0] * (1 - fx) + padded[y0, x0 + 1] * fx
    bot = padded[y0 + 1, x0] * (1 - fx) + padded[y0 + 1, x0 + 1] * fx
    out = top * (1 - fy) + bot * fy
    out[outside] = fill
    return out


def rotate(img, angle: float, fill: float = 1.0) -> np.ndarray:
    """Rotate by ``angle`` degrees about the image centre (bilinear).

    A point ``q`` of the input lands at ``c + R(angle) (q - c)`` in the
    output, with ``R`` the usual rotation acting on ``(x, y)`` = ``(col,
    row)`` coordinates.  Samples falling outside the input take ``fill``.
    """
    if abs(angle) > 10:
        raise ValueError("rotation limited to |angle| <= 10 degrees")
    img = as_image(img)
    if angle == 0:
        return img.copy()
    h, w = img.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(angle)
    c, s = math.cos(th), math.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse map: R(-angle)
    sx = cx + c * dx + s * dy
    sy = cy - s * dx + c * dy
    return _bilinear(img, sx, sy, fill)


def rotate_mask(mask, angle: float) -> np.ndarray:
    """Geometric twin of :func:`rotate` for binary masks.

    The distance to the nearest foreground pixel is rotated (it varies
    smoothly, unlike the 0/1 mask) and pixels within half a pixel of the
    rotated foreground are kept, so thin strokes stay connected.
    """
    m = np.asarray(mask, dtype=bool)
    if angle == 0:
        return m.copy()
    if not m.any():
        return m.copy()
    dist = ndimage.distance_transform_edt(~m)
    return rotate(dist, angle, fill=float(max(m.shape))) <= 0.5


def shift(img, dx: int, dy: int, fill) -> np.ndarray:
    """Integer translation; vacated pixels take ``fill``."""
    arr = np.asarray(img)
    out = np.full_like(arr, fill)
    h, w = arr.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ceil(3 sigma), clamped edges."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def add_noise_snr(img, snr_db: float, rng_seed: int) -> np.ndarray:
    """Additive white Gaussian noise at a given SNR, clamped to [0, 1].

    Signal power is the mean square of the mean-removed image.
    """
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    img = as_image(img)
    power = float(np.mean((img - img.mean()) ** 2)) if np.ptp(img) > 0 else 0.0
    var = power / 10.0 ** (snr_db / 10.0)
    if var == 0.0:
        return img.copy()
    noise = gaussian(make_rng(rng_seed, "snr-noise"), img.size).reshape(img.shape)
    return np.clip(img + math.sqrt(var) * noise, 0.0, 1.0)


def jpeg_qtable(quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in [1, 100]")
    scale = 50.0 / quality if quality < 50 else 2.0 - quality / 50.0
    return np.maximum(np.floor(JPEG_LUMA * scale + 0.5), 1.0)


def blockdct_artifacts(img, quality: int) -> np.ndarray:
    """Simulated JPEG: 8x8 block DCT, table quantization, inverse DCT.

    Works in 0..255 units with the usual level shift; the image is edge
    padded to a multiple of 8 and cropped back.
    """
    img = as_image(img)
    q = jpeg_qtable(int(quality))
    h, w = img.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(img, ((0, ph), (0, pw)), mode="edge") * 255.0 - 128.0
    bh, bw = x.shape[0] // 8, x.shape[1] // 8
    blocks = x.reshape(bh, 8, bw, 8).transpose(0, 2, 1, 3)
    coef = fft.dctn(blocks, type=2, axes=(2, 3), norm="ortho")
    coef = np.round(coef / q) * q
    rec = fft.idctn(coef, type=2, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


def disc(radius: int) -> np.ndarray:
    """Digital disc ``x^2 + y^2 <= r (r + 1)``; radius 1 is the full 3x3 block."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * (r + 1)


def morph_open(mask, radius: int) -> np.ndarray:
    """Binary opening (erosion then dilation) with a Euclidean disc."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    m = np.asarray(mask, dtype=bool)
    se = disc(radius)
    return ndimage.binary_dilation(ndimage.binary_erosion(m, se), se)


def geodesic_close_x(mask, max_gap: int, barriers=None) -> np.ndarray:
    """Bridge row gaps of at most ``max_gap`` pixels between separate pieces.

    A background run inside a row is filled when the foreground pixels on
    its two ends belong to different 8-connected components.  Gaps whose
    ends are already joined elsewhere (the notch under a narrow peak, say)
    are left open, and nothing is ever bridged along columns.  A gap is
    also left open when a column listed in ``barriers`` separates its ends
    (column ``x`` counts as separating ``a < x <= b``).
    """
    if max_gap < 0:
        raise ValueError("max_gap must be >= 0")
    m = np.asarray(mask, dtype=bool)
    out = m.copy()
    if max_gap == 0:
        return out
    w = m.shape[1]
    idx = np.flatnonzero(m)
    if idx.size < 2:
        return out
    labels = label_components(m)[0].ravel()
    a, b = idx[:-1], idx[1:]
    gap = b - a - 1
    sel = (gap > 0) & (gap <= max_gap) & (a // w == b // w) & (labels[a] != labels[b])
    if barriers is not None and len(barriers):
        bar = np.sort(np.asarray(barriers, dtype=np.int64))
        sel &= np.searchsorted(bar, a % w, "right") == np.searchsorted(bar, b % w, "right")
    starts, lengths = a[sel] + 1, gap[sel]
    if starts.size:
        offs = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        out.ravel()[np.repeat(starts, lengths) + offs] = True
    return out


_EIGHT = np.ones((3, 3), dtype=bool)


def label_components(mask) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT)


def remove_small_components(mask, min_area: int) -> np.ndarray:
    """Clear 8-connected components with fewer than ``min_area`` pixels."""
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    labels, n = label_components(mask)
    if n == 0:
        return labels > 0
    areas = np.bincount(labels.ravel())
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def _autocorr(profile: np.ndarray) -> np.ndarray:
    p = profile - profile.mean()
    n = p.size
    spec = np.fft.rfft(p, 2 * n)
    return np.fft.irfft(spec * np.conj(spec), 2 * n)[:n] / n


def estimate_grid_period(img, axis: str, min_p: int, max_p: int):
    """Grid spacing in pixels along ``axis`` ('x' or 'y'), or ``None``.

    The mean intensity profile along the axis is mean-removed and
    autocorrelated; the best lag in ``[min_p, max_p]`` is returned when its
    autocorrelation reaches ``GRID_PEAK_FRACTION`` of the lag-0 value.
    """
    img = as_image(img)
    if axis not in ("x", "y"):
        raise ValueError("axis must be 'x' or 'y'")
    profile = img.mean(axis=0) if axis == "x" else img.mean(axis=1)
    if not 2 <= min_p < max_p < profile.size / 4:
        raise ValueError("need 2 <= min_p < max_p < extent/4")
    ac = _autocorr(profile)
    if not ac[0] > 1e-15:
        return None
    lag = min_p + int(np.argmax(ac[min_p:max_p + 1]))
    if ac[lag] < GRID_PEAK_FRACTION * ac[0]:
        return None
    return lag


def _projection_variances(img: np.ndarray, angles: np.ndarray, sub: int = 8, sigma_px: float = 0.7) -> np.ndarray:
    # Dark pixels are binned at 1/sub px and the profile smoothed by a
    # sigma_px Gaussian: plain per-pixel splatting rewards angles where the
    # pixel lattice lands on integer columns and biases small skews.
    h, w = img.shape
    dark = 1.0 - np.clip(img, 0.0, 1.0)
    ys, xs = np.nonzero(dark > 0)
    weights = dark[ys, xs]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx, dy = xs - cx, ys - cy
    out = np.zeros(angles.size)
    for i, ang in enumerate(angles):
        th = math.radians(ang)
        c, s = math.cos(th), math.sin(th)
        px = cx + c * dx - s * dy
        py = cy + s * dx + c * dy
        b = np.rint(px * sub).astype(np.intp)
        keep = (b >= 0) & (b < w * sub) & (py > -0.5) & (py < h - 0.5)
        prof = np.bincount(b[keep], weights[keep], minlength=w * sub) / h
        out[i] = ndimage.gaussian_filter1d(prof, sigma_px * sub, mode="constant").var()
    return out


def estimate_skew(img, range_deg: float = 5.0, step: float = 0.1, center: float = 0.0) -> float:
    """Angle that best aligns vertical grid lines.

    Grid search over ``center + k*step`` within ``[center - range_deg,
    center + range_deg]``; the score is the variance of the column-mean
    profile of the rotated page (computed by projecting dark pixels).
    Ties go to the candidate closest to zero.
    """
    if range_deg > 5 or step <= 0:
        raise ValueError("need range <= 5 and step > 0")
    img = as_image(img)
    n = int(round(range_deg / step))
    angles = center + step * np.arange(-n, n + 1)
    scores = _projection_variances(img, angles)
    best = scores.max()
    if best <= 0:
        return 0.0 if center == 0 else float(center)
    tied = np.flatnonzero(scores >= best * (1 - 1e-12))
    pick = tied[np.argmin(np.abs(angles[tied]))]
    return float(angles[pick])


# --- PGM (P5) interchange ---------------------------------------------------

def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(as_image(img), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img) -> None:
    """Write an 8-bit binary PGM; bool masks are stored as {0, 255}."""
    arr = np.asarray(img)
    data = (arr.astype(np.uint8) * 255) if arr.dtype == bool else (
        arr if arr.dtype == np.uint8 else to_uint8(arr))
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(data).tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def read_pgm_u8(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    pos = 2
    vals = []
    for _ in range(3):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        vals.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = vals
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    return read_pgm_u8(path).astype(np.float64) / 255.0


def read_mask_pgm(path) -> np.ndarray:
    return read_pgm_u8(path) >= 128
