"""Build the multi-site page/mask/signal dataset on disk and load it back."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import raster
from ..rng import make_rng
from .profiles import BUILTIN_PROFILES, ClientProfile, apply_profile, sample_grid_contrast
from .render import CalibrationMeta, RenderSpec, render_page
from .waveforms import synth_waveforms

TRAIN_FRACTION = 0.8
DESK_COUNTS = {"C1": 200, "C2": 160, "C3": 140, "C4": 120, "C5": 100}
HR_RANGE = (50.0, 110.0)


def record_ids(client: str, n: int) -> list[str]:
    return [f"{client}-{i:05d}" for i in range(n)]


def split_records(ids: list[str], seed: int, client: str) -> dict:
    order = make_rng(seed, "split", client).permutation(len(ids))
    n_train = int(round(TRAIN_FRACTION * len(ids)))
    return {ids[i]: ("train" if rank < n_train else "val") for rank, i in enumerate(order)}


def make_page(record_id: str, profile: ClientProfile, seed: int, fs: int = 500,
              spec: RenderSpec = RenderSpec(), perturb: bool = True):
    """Waveform, render and perturbation for one record, all keyed by ``(seed, record_id)``."""
    hr = float(make_rng(seed, "hr", record_id).uniform(*HR_RANGE))
    wave_seed = int(make_rng(seed, "wave-seed", record_id).integers(0, 2**31 - 1))
    sig = synth_waveforms(wave_seed, fs, hr)
    contrast = sample_grid_contrast(profile, seed, record_id)
    page = render_page(sig, spec, contrast, seed, record_id)
    page.client = profile.name
    page.provenance.update(hr_bpm=hr, wave_seed=wave_seed)
    return apply_profile(page, profile, seed) if perturb else page


def _write_record(args) -> dict:
    root, rid, split, profile_d, seed, fs, spec_d = args
    profile = ClientProfile.from_dict(profile_d)
    page = make_page(rid, profile, seed, fs, RenderSpec(**spec_d))
    d = Path(root) / profile.name / split
    d.mkdir(parents=True, exist_ok=True)
    raster.write_pgm(d / f"{rid}.pgm", page.image)
    raster.write_pgm(d / f"{rid}.mask.pgm", page.mask)
    page.signal.to_csv(d / f"{rid}.signal.csv")
    meta = {"calib": page.calib.to_dict(), "provenance": page.provenance, "client": profile.name,
            "split": split, "fs": page.signal.fs}
    with open(d / f"{rid}.meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    rel = f"{profile.name}/{split}/{rid}"
    return {"record_id": rid, "client": profile.name, "split": split,
            "image": rel + ".pgm", "mask": rel + ".mask.pgm", "signal": rel + ".signal.csv",
            "meta": rel + ".meta.json", "calib": meta["calib"], "provenance": page.provenance}


def build_dataset(out_dir, profiles=None, counts: dict | None = None, seed: int = 0, fs: int = 500,
                  spec: RenderSpec = RenderSpec(), workers: int = 1) -> dict:
    """Render every client's pages under ``out_dir`` and write ``manifest.json``.

    ``profiles`` defaults to the five built-in sites and ``counts`` to each
    profile's ``n_pages``.  Pages are independent, so ``workers > 1`` gives
    the same bytes as a serial build.
    """
    profiles = list((profiles or BUILTIN_PROFILES).values()) if isinstance(profiles, dict) or profiles is None \
        else list(profiles)
    counts = counts or {p.name: p.n_pages for p in profiles}
    jobs = []
    for p in profiles:
        n = int(counts[p.name])
        if n <= 0:
            raise ValueError(f"client {p.name}: page count must be > 0")
        ids = record_ids(p.name, n)
        split = split_records(ids, seed, p.name)
        pd = p.to_dict()
        sd = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
        jobs += [(str(out_dir), rid, split[rid], pd, seed, fs, sd) for rid in ids]
    os.makedirs(out_dir, exist_ok=True)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_write_record, jobs, chunksize=8))
    else:
        records = [_write_record(j) for j in jobs]
    manifest = {
        "seed": seed, "fs": fs, "render_spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
        "profiles": {p.name: p.to_dict() for p in profiles},
        "counts": {p.name: int(counts[p.name]) for p in profiles},
        "records": records,
    }
    with open(Path(out_dir) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(root) -> dict:
    with open(Path(root) / "manifest.json") as fh:
        return json.load(fh)


def load_client_arrays(root, client: str, split: str, normalize: bool = True):
    """Stack a client's pages as uint8 images plus boolean masks.

    With ``normalize`` each page passes through the same robust contrast
    clipping the digitizer applies before inference.
    """
    man = load_manifest(root)
    recs = [r for r in man["records"] if r["client"] == client and r["split"] == split]
    recs.sort(key=lambda r: r["record_id"])
    imgs, masks = [], []
    for r in recs:
        img = raster.read_pgm(Path(root) / r["image"])
        if normalize:
            img = raster.robust_normalize(img, 0.01, 0.99)
        imgs.append(raster.to_uint8(img))
        masks.append(raster.read_mask_pgm(Path(root) / r["mask"]))
    if not recs:
        return np.zeros((0, 0, 0), np.uint8), np.zeros((0, 0, 0), bool), []
    return np.stack(imgs), np.stack(masks), [r["record_id"] for r in recs]


def load_calib(root, record: dict) -> CalibrationMeta:
    return CalibrationMeta.from_dict(record["calib"])
