"""Per-site perturbation profiles and their application to rendered pages.

Geometric steps (integer layout offset, then rotation about the page
centre) move the image and the mask together.  Photometric steps touch the
image only and run in scan order: paper overlays, optical blur, sensor
noise, then block-DCT compression.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .. import raster
from ..rng import make_rng
from .render import PageSample

OVERLAY_PROB = 0.15


@dataclass(frozen=True)
class ClientProfile:
    """Uniform ranges for each perturbation.  ``snr_range=None`` disables noise."""

    name: str
    skew_range: tuple = (-0.5, 0.5)
    quality_range: tuple = (90, 95)
    grid_contrast_range: tuple = (0.65, 0.75)
    snr_range: tuple | None = (35.0, 40.0)
    blur_range: tuple = (0.0, 0.2)
    offset_range: tuple = (-2, 2)
    overlay_prob: float = OVERLAY_PROB
    n_pages: int = 200

    def __post_init__(self):
        for label, r in (("skew", self.skew_range), ("quality", self.quality_range),
                         ("grid_contrast", self.grid_contrast_range), ("blur", self.blur_range),
                         ("offset", self.offset_range)) + ((("snr", self.snr_range),) if self.snr_range else ()):
            if len(r) != 2 or r[0] > r[1]:
                raise ValueError(f"{self.name}: {label} range must be (lo, hi) with lo <= hi")
        if not (1 <= self.quality_range[0] and self.quality_range[1] <= 100):
            raise ValueError(f"{self.name}: quality must lie in [1, 100]")
        if not (0 < self.grid_contrast_range[0] and self.grid_contrast_range[1] <= 1):
            raise ValueError(f"{self.name}: grid contrast must lie in (0, 1]")
        if max(abs(self.skew_range[0]), abs(self.skew_range[1])) > 10:
            raise ValueError(f"{self.name}: skew beyond +-10 degrees")
        if self.blur_range[0] < 0 or not 0 <= self.overlay_prob <= 1 or self.n_pages < 0:
            raise ValueError(f"{self.name}: invalid blur, overlay probability or page count")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClientProfile":
        d = dict(d)
        for k in ("skew_range", "quality_range", "grid_contrast_range", "blur_range", "offset_range", "snr_range"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


BUILTIN_PROFILES = {
    "C1": ClientProfile("C1", (-0.5, 0.5), (90, 95), (0.65, 0.75), (35.0, 40.0), (0.0, 0.2), (-2, 2), n_pages=200),
    "C2": ClientProfile("C2", (-1.0, 1.0), (80, 90), (0.55, 0.70), (30.0, 35.0), (0.2, 0.4), (-4, 4), n_pages=160),
    "C3": ClientProfile("C3", (-2.0, 2.0), (75, 85), (0.45, 0.65), (27.0, 32.0), (0.3, 0.6), (-6, 6), n_pages=140),
    "C4": ClientProfile("C4", (-3.0, 3.0), (65, 80), (0.35, 0.55), (24.0, 30.0), (0.5, 0.8), (-8, 8), n_pages=120),
    "C5": ClientProfile("C5", (-3.5, 3.5), (60, 75), (0.30, 0.50), (20.0, 26.0), (0.7, 1.0), (-10, 10), n_pages=100),
}
PAPER_SITE_SIZES = {"C1": 6100, "C2": 4900, "C3": 4300, "C4": 3500, "C5": 3000}


def identity_profile(name: str = "identity", grid_contrast: float = 0.7) -> ClientProfile:
    return ClientProfile(name, (0.0, 0.0), (100, 100), (grid_contrast, grid_contrast), None, (0.0, 0.0),
                         (0, 0), overlay_prob=0.0)


def geometric_only(profile: ClientProfile) -> ClientProfile:
    """Keep skew and offsets, drop every photometric step."""
    return replace(profile, quality_range=(100, 100), snr_range=None, blur_range=(0.0, 0.0), overlay_prob=0.0)


def sample_grid_contrast(profile: ClientProfile, seed: int, record_id: str) -> float:
    lo, hi = profile.grid_contrast_range
    return float(lo + (hi - lo) * make_rng(seed, "grid-contrast", record_id).random())


def draw_parameters(profile: ClientProfile, seed: int, record_id: str) -> dict:
    """One uniform draw per perturbation, keyed by ``(seed, record_id)``."""
    rng = make_rng(seed, "profile", record_id)

    def uni(r):
        return float(r[0] + (r[1] - r[0]) * rng.random())

    out = {
        "skew_deg": uni(profile.skew_range),
        "quality": int(rng.integers(profile.quality_range[0], profile.quality_range[1] + 1)),
        "snr_db": None,
        "blur_sigma": uni(profile.blur_range),
        "offset_x": int(rng.integers(profile.offset_range[0], profile.offset_range[1] + 1)),
        "offset_y": int(rng.integers(profile.offset_range[0], profile.offset_range[1] + 1)),
        "overlay": None,
        "noise_seed": int(rng.integers(0, 2**31 - 1)),
        "overlay_seed": int(rng.integers(0, 2**31 - 1)),
    }
    if profile.snr_range is not None:
        out["snr_db"] = uni(profile.snr_range)
    if rng.random() < profile.overlay_prob:
        out["overlay"] = ("shadow", "wrinkle", "handwriting")[int(rng.integers(3))]
    return out


def _overlay(img: np.ndarray, kind: str, seed: int) -> np.ndarray:
    rng = make_rng(seed, "overlay", kind)
    h, w = img.shape
    if kind == "shadow":
        # smooth multiplicative darkening from a coarse random field
        coarse = rng.random((4, 6))
        yy = np.linspace(0, 3, h)
        xx = np.linspace(0, 5, w)
        field = np.array([np.interp(xx, np.arange(6), row) for row in coarse])
        field = np.array([np.interp(yy, np.arange(4), col) for col in field.T]).T
        return img * (1.0 - 0.18 * field)
    if kind == "wrinkle":
        out = img.copy()
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(1 + int(rng.integers(2))):
            ang = rng.uniform(0, math.pi)
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            d = np.abs((xx - cx) * math.sin(ang) - (yy - cy) * math.cos(ang))
            out *= 1.0 - 0.12 * np.exp(-0.5 * (d / 1.5) ** 2)
        return out
    # handwriting: a few short smooth strokes in grey ink
    from ._draw import polyline_distance
    dist = np.full(img.shape, np.inf)
    for _ in range(2 + int(rng.integers(4))):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        steps = rng.normal(0, 3.0, (24, 2)).cumsum(axis=0) + rng.normal(0, 2.0, 2) * np.arange(24)[:, None]
        polyline_distance(x0 + steps[:, 0], y0 + steps[:, 1], 3.0, dist)
    cover = np.clip(1.0 - dist, 0.0, 1.0)
    return img * (1.0 - 0.6 * cover)


def apply_profile(page: PageSample, profile: ClientProfile, seed: int) -> PageSample:
    """Perturb a clean page according to ``profile``; the draws land in ``provenance``."""
    if page.provenance.get("perturbed"):
        raise ValueError("page has already been perturbed")
    rid = page.calib.record_id
    p = draw_parameters(profile, seed, rid)
    img, mask = page.image, page.mask
    dx, dy = p["offset_x"], p["offset_y"]
    if dx or dy:
        img = raster.shift(img, dx, dy, fill=1.0)
        mask = raster.shift(mask, dx, dy, fill=False)
    if p["skew_deg"] != 0.0:
        img = raster.rotate(img, p["skew_deg"], fill=1.0)
        mask = raster.rotate_mask(mask, p["skew_deg"])
    if p["overlay"] is not None:
        img = _overlay(img, p["overlay"], p["overlay_seed"])
    if p["blur_sigma"] > 0:
        img = raster.gaussian_blur(img, p["blur_sigma"])
    if p["snr_db"] is not None:
        img = raster.add_noise_snr(img, p["snr_db"], p["noise_seed"])
    img = raster.blockdct_artifacts(img, p["quality"])
    prov = {**page.provenance, **p, "profile": profile.name, "perturbed": True}
    return PageSample(np.clip(img, 0.0, 1.0), mask, page.calib.shifted(dx, dy), page.signal, profile.name, prov)
