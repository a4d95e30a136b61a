"""Mask and waveform metrics plus the inferential statistics for method comparisons.

Normal quantiles and the Student-t CDF come from :mod:`scipy.special`
(``ndtr``/``ndtri``/``stdtr``); the tests check them against the standard
library's ``statistics.NormalDist`` and a direct incomplete-beta evaluation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri, stdtr

from .rng import make_rng


# -- segmentation metrics ----------------------------------------------------

def confusion(pred, gt) -> tuple[int, int, int, int]:
    """``(TP, FP, FN, TN)`` as Python ints."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return tp, fp, fn, tn


def _ratio(num: int, den: int, empty: float) -> float:
    return empty if den == 0 else num / den


def mask_metrics(pred, gt, prob=None) -> dict:
    """Overlap and error rates from the 2x2 confusion counts.

    Empty-vs-empty gives 1 for dice, iou, precision and recall.  When
    ``prob`` is given the mean per-pixel BCE against ``gt`` is included.
    """
    tp, fp, fn, tn = confusion(pred, gt)
    both_empty = tp + fp + fn == 0
    e = 1.0 if both_empty else 0.0
    out = {
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        "dice": _ratio(2 * tp, 2 * tp + fp + fn, e),
        "iou": _ratio(tp, tp + fp + fn, e),
        "precision": _ratio(tp, tp + fp, e),
        "recall": _ratio(tp, tp + fn, e),
        "specificity": _ratio(tn, tn + fp, 0.0),
        "mask_mse": (fp + fn) / (tp + fp + fn + tn),
    }
    if prob is not None:
        p = np.clip(np.asarray(prob, dtype=np.float64), 1e-12, 1 - 1e-12)
        g = np.asarray(gt, dtype=bool)
        out["bce"] = float(-np.mean(np.where(g, np.log(p), np.log1p(-p))))
    return out


def weighted_global(client_means, weights) -> float:
    """Sample-size weighted mean of per-client means."""
    m = np.asarray(client_means, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if m.shape != w.shape or np.any(w <= 0):
        raise ValueError("need one positive weight per client mean")
    return float(np.sum(w * m) / np.sum(w))


def weighted_global_rows(values, clients, weights: dict) -> float:
    """As :func:`weighted_global` but from per-page values tagged by client."""
    values = np.asarray(values, dtype=np.float64)
    clients = np.asarray(clients)
    names = [c for c in weights if np.any(clients == c)]
    means = [values[clients == c].mean() for c in names]
    return weighted_global(means, [weights[c] for c in names])


def signal_mse(pred, gt) -> np.ndarray:
    """Per-lead mean squared error in mV^2 for two lead sets on one time grid.

    Only samples the reconstruction actually observed count (its
    ``observed`` mask, else the reference's, else all of them).
    """
    a = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    b = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"lead arrays differ in shape: {a.shape} vs {b.shape}")
    if getattr(pred, "smoothed", False):
        raise ValueError("metrics must be computed on the unsmoothed reconstruction")
    obs = getattr(pred, "observed", None)
    if obs is None:
        obs = getattr(gt, "observed", None)
    if obs is None:
        return np.mean((a - b) ** 2, axis=1)
    obs = np.asarray(obs, dtype=bool)
    d2 = np.where(obs, (a - b) ** 2, 0.0)
    return d2.sum(axis=1) / np.maximum(obs.sum(axis=1), 1)


# -- effect sizes and tests --------------------------------------------------

def hedges_g_paired(diffs) -> float:
    d = np.asarray(diffs, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ValueError("need at least two paired differences")
    sd = float(np.std(d, ddof=1))
    if sd == 0:
        raise ValueError("zero spread: effect size undefined")
    j = 1.0 - 3.0 / (4.0 * (n - 1) - 1.0)
    return j * float(np.mean(d)) / sd


@dataclass(frozen=True)
class TTest:
    name: str
    n: int
    mean: float
    t: float | None
    p: float | None
    reject: bool


def paired_t(diffs) -> tuple[float | None, float | None]:
    """Two-sided one-sample t-test of ``mean(diffs) == 0``; ``(None, None)`` if sd is 0."""
    d = np.asarray(diffs, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ValueError("need at least two paired differences")
    sd = float(np.std(d, ddof=1))
    if sd == 0:
        return None, None
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    p = float(2.0 * stdtr(n - 1, -abs(t)))
    return t, min(p, 1.0)


def holm(pvalues, alpha: float = 0.05) -> list[bool]:
    """Holm step-down decisions; undefined p-values (None) are never rejected."""
    idx = [i for i, p in enumerate(pvalues) if p is not None]
    m = len(idx)
    order = sorted(idx, key=lambda i: pvalues[i])
    reject = [False] * len(pvalues)
    for rank, i in enumerate(order):
        if pvalues[i] <= alpha / (m - rank):
            reject[i] = True
        else:
            break
    return reject


def paired_t_holm(pairs: dict, alpha: float = 0.05) -> list[TTest]:
    """Paired t-tests for every named difference vector, Holm-corrected."""
    names = list(pairs)
    stats = [paired_t(pairs[k]) for k in names]
    rej = holm([p for _, p in stats], alpha)
    return [TTest(k, int(np.size(pairs[k])), float(np.mean(pairs[k])), t, p, r)
            for k, (t, p), r in zip(names, stats, rej)]


# -- BCa bootstrap -----------------------------------------------------------

@dataclass(frozen=True)
class CiResult:
    point: float
    lower: float
    upper: float
    level: float
    B: int
    z0: float
    a: float


def _mean_diff(a, b):
    return float(np.mean(a - b)) if b is not None else float(np.mean(a))


def _quantile(sorted_stats: np.ndarray, q: float) -> float:
    """Linear-interpolation quantile of an already sorted sample."""
    n = sorted_stats.size
    h = (n - 1) * min(max(q, 0.0), 1.0)
    lo = int(math.floor(h))
    hi = min(lo + 1, n - 1)
    return float(sorted_stats[lo] + (h - lo) * (sorted_stats[hi] - sorted_stats[lo]))


def _strata(clients) -> list[np.ndarray]:
    clients = np.asarray(clients)
    return [np.flatnonzero(clients == c) for c in dict.fromkeys(clients.tolist())]


def _jackknife_acceleration(a, b, stat) -> float:
    n = a.size
    theta = np.empty(n)
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        keep[i] = False
        theta[i] = stat(a[keep], None if b is None else b[keep])
        keep[i] = True
    d = theta.mean() - theta
    den = 6.0 * np.sum(d * d) ** 1.5
    return 0.0 if den == 0 else float(np.sum(d ** 3) / den)


def bootstrap_indices(clients, B: int, seed: int) -> np.ndarray:
    """``(B, n)`` stratified resample indices, replicate ``b`` keyed by ``(seed, b)``."""
    strata = _strata(clients)
    n = sum(s.size for s in strata)
    out = np.empty((B, n), dtype=np.int64)
    for b in range(B):
        rng = make_rng(seed, "bca", b)
        out[b] = np.concatenate([s[rng.integers(0, s.size, s.size)] for s in strata])
    return out


def exhaustive_indices(clients) -> np.ndarray:
    """Every stratified resample (product of per-stratum multisets, with multiplicity)."""
    strata = _strata(clients)
    per = [list(itertools.product(s.tolist(), repeat=s.size)) for s in strata]
    return np.array([sum(combo, ()) for combo in itertools.product(*per)], dtype=np.int64)


def bca_from_replicates(point: float, reps: np.ndarray, acc: float, level: float = 0.95) -> tuple:
    reps = np.sort(np.asarray(reps, dtype=np.float64))
    frac = np.count_nonzero(reps < point) / reps.size
    if frac <= 0.0 or frac >= 1.0 or reps[0] == reps[-1]:
        # all replicates on one side (or identical): no usable bias estimate
        if reps[0] == reps[-1]:
            return point, point, 0.0
        frac = min(max(frac, 0.5 / reps.size), 1 - 0.5 / reps.size)
    z0 = float(ndtri(frac))
    alpha = (1.0 - level) / 2.0
    bounds = []
    for q in (alpha, 1.0 - alpha):
        zq = float(ndtri(q))
        adj = float(ndtr(z0 + (z0 + zq) / (1.0 - acc * (z0 + zq))))
        bounds.append(_quantile(reps, adj))
    lo, hi = min(bounds[0], point), max(bounds[1], point)
    return lo, hi, z0


def bca_ci(values, clients, paired=None, B: int = 10_000, level: float = 0.95, seed: int = 0,
           exhaustive: bool = False) -> CiResult:
    """Client-stratified BCa interval for the mean (or mean paired difference).

    ``values`` and the optional ``paired`` column are resampled with the
    same indices.  ``exhaustive=True`` replaces random resampling by full
    enumeration of every stratified resample (tiny inputs only).
    """
    a = np.asarray(values, dtype=np.float64)
    b = None if paired is None else np.asarray(paired, dtype=np.float64)
    strata = _strata(clients)
    if len(strata) < 2 or min(s.size for s in strata) < 2:
        raise ValueError("need >= 2 strata with >= 2 pages each")
    if b is not None and b.shape != a.shape:
        raise ValueError("paired columns must have equal length")
    point = _mean_diff(a, b)
    diff = a if b is None else a - b
    if np.all(diff == diff[0]):
        return CiResult(point, point, point, level, 0 if exhaustive else B, 0.0, 0.0)
    idx = exhaustive_indices(clients) if exhaustive else bootstrap_indices(clients, B, seed)
    reps = diff[idx].mean(axis=1)
    acc = _jackknife_acceleration(a, b, _mean_diff)
    lo, hi, z0 = bca_from_replicates(point, reps, acc, level)
    return CiResult(point, lo, hi, level, idx.shape[0], z0, acc)
