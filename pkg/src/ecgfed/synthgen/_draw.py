"""Distance field of a polyline, accumulated as a running minimum."""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def polyline_distance(xs, ys, reach, dist, col_lo=0, col_hi=-1):
    """Lower ``dist[y, x]`` to the distance from pixel centre ``(x, y)`` to the polyline.

    Only pixels within ``reach`` of a segment's bounding box and with
    ``col_lo <= x < col_hi`` are visited (``col_hi < 0`` means the full width).
    """
    h, w = dist.shape
    if col_hi < 0 or col_hi > w:
        col_hi = w
    for i in range(xs.shape[0] - 1):
        ax, ay, bx, by = xs[i], ys[i], xs[i + 1], ys[i + 1]
        x_lo = max(int(math.floor(min(ax, bx) - reach)), col_lo)
        x_hi = min(int(math.ceil(max(ax, bx) + reach)), col_hi - 1)
        y_lo = max(int(math.floor(min(ay, by) - reach)), 0)
        y_hi = min(int(math.ceil(max(ay, by) + reach)), h - 1)
        dx = bx - ax
        dy = by - ay
        l2 = dx * dx + dy * dy
        for y in range(y_lo, y_hi + 1):
            for x in range(x_lo, x_hi + 1):
                t = 0.0
                if l2 > 0.0:
                    t = ((x - ax) * dx + (y - ay) * dy) / l2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                ex = ax + t * dx - x
                ey = ay + t * dy - y
                d = math.sqrt(ex * ex + ey * ey)
                if d < dist[y, x]:
                    dist[y, x] = d
    return dist


def polyline_distance_np(xs, ys, shape) -> np.ndarray:
    """Dense reference: exact distance of every pixel centre to the polyline."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    best = np.full(shape, np.inf)
    for i in range(len(xs) - 1):
        ax, ay, bx, by = xs[i], ys[i], xs[i + 1], ys[i + 1]
        dx, dy = bx - ax, by - ay
        l2 = dx * dx + dy * dy
        t = np.zeros(shape) if l2 == 0 else np.clip(((xx - ax) * dx + (yy - ay) * dy) / l2, 0, 1)
        best = np.minimum(best, np.hypot(ax + t * dx - xx, ay + t * dy - yy))
    return best
