"""Glue between a resolved configuration and the library modules.

These helpers turn config sections into the module dataclasses, load a
rendered dataset into client arrays, and write the run manifest.
"""
from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

import numpy as np

from .. import __version__
from ..digitize import VectorizeParams
from ..dpcore import DpConfig
from ..fedcore import FedConfig, PrivacyConfig
from ..segnet import ClientData, NetConfig, OptConfig
from ..synthgen import BUILTIN_PROFILES, ClientProfile, load_client_arrays, load_manifest
from ..segnet.checkpoint import atomic_write_bytes
from .config import canonical_json, config_hash


def code_version() -> str:
    """Package version plus a git-style blob hash over every source file."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha1()
    for path in sorted(root.rglob("*.py")):
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        h.update(f"{path.relative_to(root).as_posix()} {blob}\n".encode())
    return f"{__version__}+{h.hexdigest()[:12]}"


def prepare_dir(path, force: bool, what: str) -> Path:
    """Create ``path``; an existing non-empty directory needs ``force`` and is then emptied."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"{what} directory {path} is not empty (use --force to replace it)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def profiles_from(cfg: dict) -> tuple[list, dict]:
    """Client profiles named in ``dataset.counts``, with file overrides applied."""
    ds = cfg["dataset"]
    overrides = {}
    if ds["profiles_file"]:
        path = Path(ds["profiles_file"])
        if not path.is_file():
            raise FileNotFoundError(f"profiles file not found: {path}")
        overrides = json.loads(path.read_text())
    out = []
    for name in ds["counts"]:
        base = BUILTIN_PROFILES[name].to_dict() if name in BUILTIN_PROFILES else None
        if base is None and name not in overrides:
            raise KeyError(f"client {name!r} has no built-in profile and no override")
        d = dict(base or {"name": name})
        d.update(overrides.get(name, {}))
        d["name"] = name
        d["n_pages"] = int(ds["counts"][name])
        out.append(ClientProfile.from_dict(d))
    return out, overrides


def net_config(cfg: dict) -> NetConfig:
    m = cfg["model"]
    return NetConfig(depth=m["depth"], channels=tuple(m["channels"]), convs_per_level=m["convs_per_level"],
                     deep_supervision_weights=tuple(m["deep_supervision_weights"]), patch=m["patch"],
                     batch=m["batch"], norm_eps=m["norm_eps"])


def opt_config(cfg: dict) -> OptConfig:
    o = cfg["optim"]
    return OptConfig(peak_lr=o["peak_lr"], warmup_steps=o["warmup_steps"], floor_lr=o["floor_lr"],
                     weight_decay=o["weight_decay"], betas=tuple(o["betas"]), eps=o["eps"],
                     clip_norm=o["clip_norm"])


def fed_config(cfg: dict) -> FedConfig:
    f = dict(cfg["federation"])
    f.pop("seed")
    return FedConfig(**f)


def privacy_config(cfg: dict) -> PrivacyConfig:
    p = cfg["privacy"]
    dp = DpConfig(sigma=p["sigma"], C=p["C"], delta=p["delta"], enabled=p["dp"])
    return PrivacyConfig(secagg=p["secagg"], dp=dp)


def vectorize_params(cfg: dict) -> VectorizeParams:
    d = dict(cfg["digitize"])
    d.pop("overlap")
    return VectorizeParams(**d)


def load_clients(root, split: str) -> list:
    """One :class:`ClientData` per client in manifest order."""
    man = load_manifest(root)
    out = []
    for i, name in enumerate(man["counts"]):
        x, m, _ = load_client_arrays(root, name, split)
        if len(x):
            out.append(ClientData(name, i, x, m))
    return out


def run_manifest(cfg: dict, result, privacy: PrivacyConfig, dataset_root) -> dict:
    """Everything needed to audit a finished run; no wall-clock fields."""
    last = result.records[-1] if result.records else None
    privacy_summary = None
    if privacy.dp.enabled:
        privacy_summary = result.ledger.to_dict(privacy.dp.delta)
    ds_man = load_manifest(dataset_root)
    return {
        "config_hash": config_hash(cfg),
        "code_version": code_version(),
        "seeds": {"dataset": ds_man["seed"], "train": cfg["federation"]["seed"]},
        "method": cfg["federation"]["aggregator"],
        "secagg": privacy.secagg,
        "privacy": privacy_summary,
        "checkpoints": {str(k): v for k, v in sorted(result.checkpoints.items())},
        "final_metrics": None if last is None else {
            "round": last.round, "val_dice": last.val_dice, "val_client": last.val_client},
        "dataset_root": str(dataset_root),
        "config": json.loads(canonical_json(cfg)),
    }


def final_params_path(run_dir) -> Path:
    man = json.loads((Path(run_dir) / "manifest.json").read_text())
    last = max(man["checkpoints"], key=int)
    return Path(run_dir) / man["checkpoints"][last]


def as_float_list(x) -> list:
    return [float(v) for v in np.ravel(x)]
