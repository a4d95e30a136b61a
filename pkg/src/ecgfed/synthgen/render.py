"""Render a 12-lead record onto a calibrated 3x4 ECG page.

Pixel centres sit at integer coordinates.  Column ``k`` of the layout
shows seconds ``[2.5k, 2.5k + 2.5)`` of its three leads; a panel is
``2.5 s * paper_speed`` wide and ``panel_mm`` tall with the baseline at
its vertical centre.  Traces are drawn from a distance field: a pixel at
distance ``d`` from the polyline gets ink coverage
``clip(w/2 + 0.5 - d, 0, 1)`` and belongs to the mask when ``d <= w/2``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..rng import make_rng
from ._draw import polyline_distance
from .waveforms import LEADS, LeadSignalSet

LAYOUT = (
    ("I", "aVR", "V1", "V4"),
    ("II", "aVL", "V2", "V5"),
    ("III", "aVF", "V3", "V6"),
)
COLUMN_SECONDS = 2.5


@dataclass(frozen=True)
class RenderSpec:
    """Page geometry and stroke settings."""

    mm_per_px: float = 0.25
    margin_px: int = 40
    panel_mm: float = 40.0
    paper_speed: float = 25.0
    gain: float = 10.0
    stroke_px: tuple = (1.0, 2.0)
    minor_mm: float = 1.0
    major_every: int = 5
    grid_line_mm: float = 0.1
    pulse_mv: float = 1.0
    pulse_s: float = 0.2

    @property
    def panel_w(self) -> int:
        return int(round(COLUMN_SECONDS * self.paper_speed / self.mm_per_px))

    @property
    def panel_h(self) -> int:
        return int(round(self.panel_mm / self.mm_per_px))

    @property
    def page_shape(self) -> tuple[int, int]:
        return (2 * self.margin_px + 3 * self.panel_h, 2 * self.margin_px + 4 * self.panel_w)


@dataclass
class CalibrationMeta:
    """Everything needed to map page pixels back to seconds and millivolts.

    ``panel_boxes`` maps a lead to ``(x0, y0, x1, y1)`` with exclusive upper
    corners; ``time_windows`` maps it to the seconds shown; ``baseline_rows``
    gives the 0 mV row of each panel.
    """

    mm_per_px_x: float
    mm_per_px_y: float
    paper_speed: float
    gain: float
    panel_boxes: dict
    time_windows: dict
    baseline_rows: dict
    record_id: str
    width: int
    height: int
    pulse_boxes: list = field(default_factory=list)

    def __post_init__(self):
        if not (self.paper_speed > 0 and self.gain > 0):
            raise ValueError("paper_speed and gain must be positive")

    def px_per_second(self) -> float:
        return self.paper_speed / self.mm_per_px_x

    def px_per_mv(self) -> float:
        return self.gain / self.mm_per_px_y

    def shifted(self, dx: int, dy: int) -> "CalibrationMeta":
        boxes = {k: (x0 + dx, y0 + dy, x1 + dx, y1 + dy) for k, (x0, y0, x1, y1) in self.panel_boxes.items()}
        base = {k: v + dy for k, v in self.baseline_rows.items()}
        pulses = [(x0 + dx, y0 + dy, x1 + dx, y1 + dy) for x0, y0, x1, y1 in self.pulse_boxes]
        return CalibrationMeta(self.mm_per_px_x, self.mm_per_px_y, self.paper_speed, self.gain, boxes,
                               dict(self.time_windows), base, self.record_id, self.width, self.height, pulses)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["panel_boxes"] = {k: list(v) for k, v in self.panel_boxes.items()}
        d["time_windows"] = {k: list(v) for k, v in self.time_windows.items()}
        d["pulse_boxes"] = [list(b) for b in self.pulse_boxes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationMeta":
        return cls(
            float(d["mm_per_px_x"]), float(d["mm_per_px_y"]), float(d["paper_speed"]), float(d["gain"]),
            {k: tuple(int(x) for x in v) for k, v in d["panel_boxes"].items()},
            {k: tuple(float(x) for x in v) for k, v in d["time_windows"].items()},
            {k: float(v) for k, v in d["baseline_rows"].items()},
            str(d["record_id"]), int(d["width"]), int(d["height"]),
            [tuple(int(x) for x in b) for b in d.get("pulse_boxes", [])],
        )


@dataclass
class PageSample:
    image: np.ndarray  # float64 in [0, 1]
    mask: np.ndarray  # bool
    calib: CalibrationMeta
    signal: LeadSignalSet
    client: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError("image and mask must have equal shape")


def layout_calibration(spec: RenderSpec, record_id: str) -> CalibrationMeta:
    h, w = spec.page_shape
    m = spec.margin_px
    boxes, windows, base = {}, {}, {}
    for r, row in enumerate(LAYOUT):
        for c, lead in enumerate(row):
            x0 = m + c * spec.panel_w
            y0 = m + r * spec.panel_h
            boxes[lead] = (x0, y0, x0 + spec.panel_w, y0 + spec.panel_h)
            windows[lead] = (COLUMN_SECONDS * c, COLUMN_SECONDS * (c + 1))
            base[lead] = float(y0 + spec.panel_h // 2)
    pulse_w = int(round(spec.pulse_s * spec.paper_speed / spec.mm_per_px))
    pulse_h = int(round(spec.pulse_mv * spec.gain / spec.mm_per_px))
    pulses = []
    for r in range(3):
        b = int(m + r * spec.panel_h + spec.panel_h // 2)
        x0 = (m - pulse_w) // 2
        pulses.append((x0, b - pulse_h, x0 + pulse_w, b))
    return CalibrationMeta(spec.mm_per_px, spec.mm_per_px, spec.paper_speed, spec.gain, boxes, windows, base,
                           record_id, w, h, pulses)


def grid_image(shape, spec: RenderSpec, contrast: float) -> np.ndarray:
    """White page with 1-mm minor and 5-mm major lines.

    Major-line ink has Michelson contrast ``contrast`` against the white
    background, i.e. intensity ``(1 - c) / (1 + c)``; minor-line ink uses
    half that contrast.  Lines are ``grid_line_mm`` wide, so a pixel on a
    line is only partly inked (box-filter footprint).
    """
    if not 0 < contrast <= 1:
        raise ValueError("grid contrast must lie in (0, 1]")
    h, w = shape
    step = spec.minor_mm / spec.mm_per_px
    cover = min(spec.grid_line_mm / spec.mm_per_px, 1.0)
    major = 1.0 - cover * (1.0 - (1.0 - contrast) / (1.0 + contrast))
    minor = 1.0 - cover * (1.0 - (1.0 - contrast / 2) / (1.0 + contrast / 2))

    def levels(n):
        v = np.ones(n)
        idx = np.arange(n) - spec.margin_px
        k = idx / step
        on = np.isclose(k, np.round(k))
        v[on] = minor
        v[on & (np.round(k).astype(int) % spec.major_every == 0)] = major
        return v

    return np.minimum(levels(h)[:, None], levels(w)[None, :])


def trace_polylines(signal: LeadSignalSet, calib: CalibrationMeta) -> dict:
    """Analytic trace of every lead as pixel-space ``(xs, ys)`` arrays."""
    out = {}
    t = signal.times
    pps, ppm = calib.px_per_second(), calib.px_per_mv()
    for lead in LEADS:
        x0, _, _, _ = calib.panel_boxes[lead]
        t0, t1 = calib.time_windows[lead]
        sel = (t >= t0 - 1e-12) & (t < t1 - 1e-12)
        xs = x0 + (t[sel] - t0) * pps
        ys = calib.baseline_rows[lead] - signal.lead(lead)[sel] * ppm
        out[lead] = (xs, ys)
    return out


def pulse_polyline(box) -> tuple[np.ndarray, np.ndarray]:
    x0, y_top, x1, b = box
    xs = np.array([x0 - 4, x0, x0, x1, x1, x1 + 4], dtype=np.float64)
    ys = np.array([b, b, y_top, y_top, b, b], dtype=np.float64)
    return xs, ys


def stroke_distance(polys, shape, reach: float = 3.0, columns=None) -> np.ndarray:
    """Distance field of several polylines; ``columns`` optionally confines each to ``[lo, hi)``."""
    dist = np.full(shape, np.inf)
    polys = list(polys)
    columns = columns or [(0, -1)] * len(polys)
    for (xs, ys), (lo, hi) in zip(polys, columns):
        polyline_distance(np.ascontiguousarray(xs, dtype=np.float64),
                          np.ascontiguousarray(ys, dtype=np.float64), reach, dist, lo, hi)
    return dist


def observed_mask(signal: LeadSignalSet, calib: CalibrationMeta) -> np.ndarray:
    t = signal.times
    pps = calib.px_per_second()
    obs = np.zeros(signal.data.shape, dtype=bool)
    for i, lead in enumerate(LEADS):
        t0, t1 = calib.time_windows[lead]
        x0, _, x1, _ = calib.panel_boxes[lead]
        last = t0 + (x1 - 1 - x0) / pps
        obs[i] = (t >= t0 - 1e-12) & (t <= last + 1e-12)
    return obs


def render_page(signal: LeadSignalSet, spec: RenderSpec = RenderSpec(), grid_contrast: float = 0.7,
                seed: int = 0, record_id: str = "rec") -> PageSample:
    """Draw grid, calibration pulses and all twelve traces; return the clean page and its mask."""
    rng = make_rng(seed, "render", record_id)
    lo, hi = spec.stroke_px
    width = float(lo + (hi - lo) * rng.random())
    calib = layout_calibration(spec, record_id)
    shape = (calib.height, calib.width)
    img = grid_image(shape, spec, grid_contrast)
    polys = trace_polylines(signal, calib)
    # each lead's ink stays inside its own panel columns
    cols = [(calib.panel_boxes[ld][0], calib.panel_boxes[ld][2]) for ld in polys]
    d_trace = stroke_distance(polys.values(), shape, columns=cols)
    d_pulse = stroke_distance([pulse_polyline(b) for b in calib.pulse_boxes], shape)
    half = width / 2.0
    cover = np.clip(half + 0.5 - np.minimum(d_trace, d_pulse), 0.0, 1.0)
    img = img * (1.0 - cover)
    mask = d_trace <= half
    prov = {"record_id": record_id, "stroke_px": width, "grid_contrast": float(grid_contrast)}
    return PageSample(img, mask, calib, signal, provenance=prov)
