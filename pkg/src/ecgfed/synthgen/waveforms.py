"""Synthetic 12-lead waveforms and CSV interchange.

Each beat is a sum of Gaussian bumps (P, Q, R, S, T).  A bump has a
frontal-plane axis that fixes leads I and II; the remaining limb leads
follow from Einthoven/Goldberger relations, and the precordial leads scale
the bump by a per-lead factor.  Seeded jitter perturbs beat onsets,
amplitudes and axes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ..rng import make_rng

LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
DURATION = 10.0
ONSET_JITTER = 0.02  # s, bound on each beat's deviation from the nominal grid
AMPLITUDE_LIMIT = 3.0

# name, centre after onset [s], width [s], amplitude [mV], frontal axis [deg], V1..V6 factors
_BUMPS = (
    ("P", 0.06, 0.020, 0.12, 55.0, (0.5, 0.6, 0.7, 0.8, 0.8, 0.7)),
    ("Q", 0.16, 0.012, -0.08, 60.0, (0.0, 0.1, 0.4, 0.8, 1.0, 1.0)),
    ("R", 0.195, 0.017, 1.05, 60.0, (0.25, 0.45, 0.75, 1.1, 1.2, 1.0)),
    ("S", 0.23, 0.015, -0.30, 60.0, (2.8, 3.0, 2.0, 1.0, 0.5, 0.3)),
    ("T", None, 0.045, 0.28, 45.0, (-0.3, 0.8, 1.0, 1.0, 0.9, 0.8)),
)


@dataclass
class LeadSignalSet:
    """Twelve leads sampled at ``fs`` Hz over ``duration`` seconds (mV).

    ``observed`` optionally marks which samples a reconstruction actually
    saw (a printed page shows each lead for one quarter of the record).
    """

    data: np.ndarray
    fs: float
    duration: float = DURATION
    observed: np.ndarray | None = None
    smoothed: bool = False
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        n = int(round(self.fs * self.duration))
        if self.data.shape != (len(LEADS), n):
            raise ValueError(f"expected ({len(LEADS)}, {n}) samples, got {self.data.shape}")
        if self.observed is not None:
            self.observed = np.asarray(self.observed, dtype=bool)
            if self.observed.shape != self.data.shape:
                raise ValueError("observed mask must match data shape")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) / self.fs

    def lead(self, name: str) -> np.ndarray:
        return self.data[LEADS.index(name)]

    def to_csv(self, path) -> None:
        """One row per sample; cells outside the ``observed`` mask are left empty."""
        obs = self.observed
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t",) + LEADS)
            for i, t in enumerate(self.times):
                vals = self.data[:, i]
                cells = [repr(float(v)) if obs is None or obs[j, i] else "" for j, v in enumerate(vals)]
                w.writerow([repr(float(t))] + cells)


def _limb_leads(a_I: float, a_II: float) -> np.ndarray:
    return np.array([a_I, a_II, a_II - a_I, -(a_I + a_II) / 2.0, a_I - a_II / 2.0, a_II - a_I / 2.0])


def synth_waveforms(seed: int, fs: int = 500, hr_bpm: float = 72.0) -> LeadSignalSet:
    """Ten seconds of a regular synthetic rhythm at ``hr_bpm``."""
    if fs not in (100, 500):
        raise ValueError("fs must be 100 or 500 Hz")
    if not 40 <= hr_bpm <= 180:
        raise ValueError("hr_bpm must lie in [40, 180]")
    rng = make_rng(seed, "waveform")
    rr = 60.0 / hr_bpm
    n = int(round(fs * DURATION))
    t = np.arange(n) / fs
    # per-record morphology
    scales = 1.0 + 0.15 * (2.0 * rng.random(len(_BUMPS)) - 1.0)
    axes = np.array([b[4] for b in _BUMPS]) + 20.0 * (2.0 * rng.random(len(_BUMPS)) - 1.0)
    phase = rr * (0.1 + 0.2 * rng.random())
    qt_centre = 0.17 + 0.25 * math.sqrt(rr) + 0.03
    out = np.zeros((len(LEADS), n))
    onsets = []
    k = 0
    while True:
        onset = phase + k * rr + ONSET_JITTER * (2.0 * rng.random() - 1.0)
        beat_gain = 1.0 + 0.05 * (2.0 * rng.random() - 1.0)
        if onset >= DURATION:
            break
        onsets.append(onset)
        for (name, centre, width, amp, _, vf), s, ax in zip(_BUMPS, scales, axes):
            c = onset + (qt_centre if centre is None else centre)
            lo, hi = max(int((c - 5 * width) * fs), 0), min(int((c + 5 * width) * fs) + 1, n)
            if lo >= hi:
                continue
            shape = np.exp(-0.5 * ((t[lo:hi] - c) / width) ** 2)
            a = amp * s * beat_gain
            th = math.radians(ax)
            gains = np.concatenate([_limb_leads(a * math.cos(th), a * math.cos(th - math.pi / 3)),
                                    a * np.asarray(vf)])
            out[:, lo:hi] += gains[:, None] * shape[None, :]
        k += 1
    # slow baseline wander, independent per lead
    f = 0.15 + 0.3 * rng.random(len(LEADS))
    ph = 2 * math.pi * rng.random(len(LEADS))
    out += 0.04 * np.sin(2 * math.pi * f[:, None] * t[None, :] + ph[:, None])
    np.clip(out, -AMPLITUDE_LIMIT, AMPLITUDE_LIMIT, out=out)
    return LeadSignalSet(out, float(fs), flags={"onsets": onsets, "hr_bpm": float(hr_bpm)})


def import_csv_signal(path, fs: float | None = None) -> LeadSignalSet:
    """Read ``time,I,...,V6`` (any column order) onto a 10-s grid at ``fs``.

    Without ``fs`` the rate is the rounded inverse median time step.  Shorter
    records are zero-padded on the right and longer ones clipped.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    tcol = next((i for i, h in enumerate(header) if h.lower() in ("time", "t")), None)
    if tcol is None:
        raise ValueError(f"{path}: no time column")
    missing = [ld for ld in LEADS if ld not in header]
    if missing:
        raise ValueError(f"{path}: missing lead column(s) {', '.join(missing)}")
    body = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=np.float64)
    if body.shape[0] < 2:
        raise ValueError(f"{path}: need at least two samples")
    tt = body[:, tcol] - body[0, tcol]
    if np.any(np.diff(tt) <= 0):
        raise ValueError(f"{path}: time column is not strictly increasing")
    if fs is None:
        fs = float(round(1.0 / float(np.median(np.diff(tt)))))
    n = int(round(fs * DURATION))
    grid = np.arange(n) / fs
    data = np.zeros((len(LEADS), n))
    inside = grid <= tt[-1] + 1e-9
    for i, ld in enumerate(LEADS):
        data[i, inside] = np.interp(grid[inside], tt, body[:, header.index(ld)])
    return LeadSignalSet(data, float(fs))
