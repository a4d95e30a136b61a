from .dataset import DESK_COUNTS, build_dataset, load_client_arrays, load_manifest, make_page, split_records
from .profiles import (BUILTIN_PROFILES, PAPER_SITE_SIZES, ClientProfile, apply_profile, draw_parameters,
                       geometric_only, identity_profile)
from .render import LAYOUT, CalibrationMeta, PageSample, RenderSpec, render_page, trace_polylines
from .waveforms import LEADS, LeadSignalSet, import_csv_signal, synth_waveforms

__all__ = [
    "BUILTIN_PROFILES", "DESK_COUNTS", "LAYOUT", "LEADS", "PAPER_SITE_SIZES", "CalibrationMeta", "ClientProfile",
    "LeadSignalSet", "PageSample", "RenderSpec", "apply_profile", "build_dataset", "draw_parameters",
    "geometric_only", "identity_profile", "import_csv_signal", "load_client_arrays", "load_manifest", "make_page",
    "render_page", "split_records", "synth_waveforms", "trace_polylines",
]
