"""Experiment configuration: one file, sections of ``key = value``, or JSON.

Every key below carries its default and a one-line note; :func:`resolve`
merges a user file over these defaults, rejects unknown sections and keys,
and type-checks the result with a JSON schema derived from the same table.
Values in the text form are read as JSON literals where possible, so
``channels = [8, 16, 32]`` and ``secagg = true`` work; anything else is
taken as a bare string.
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from ..synthgen.dataset import DESK_COUNTS

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}


def _arr(item, n=None):
    s = {"type": "array", "items": item}
    if n is not None:
        s.update(minItems=n, maxItems=n)
    return s


# section -> key -> (default, schema, note)
TABLE = {
    "dataset": {
        "root": ("data/desk", _STR, "dataset directory written by `render` and read by `train`"),
        "seed": (0, _INT, "master seed for waveforms, rendering and splits"),
        "counts": (dict(DESK_COUNTS), {"type": "object", "additionalProperties": {"type": "integer", "minimum": 1}},
                   "pages per client; keys select the built-in site profiles"),
        "profiles_file": (None, {"type": ["string", "null"]}, "JSON file of ClientProfile overrides by client"),
        "fs": (500, {"enum": [100, 500]}, "waveform sampling rate in Hz"),
        "workers": (1, {"type": "integer", "minimum": 1}, "render processes"),
    },
    "model": {
        "depth": (3, {"type": "integer", "minimum": 2}, "encoder levels"),
        "channels": ([8, 16, 32], _arr(_INT), "channels per level"),
        "convs_per_level": (2, {"type": "integer", "minimum": 1}, "3x3 blocks per encoder level"),
        "deep_supervision_weights": ([1.0, 0.5], _arr(_NUM, 2), "(main, aux) loss weights"),
        "patch": (128, {"type": "integer", "minimum": 8}, "training patch side in pixels"),
        "batch": (2, {"type": "integer", "minimum": 1}, "pages per local step"),
        "norm_eps": (1e-5, _NUM, "instance norm epsilon"),
    },
    "optim": {
        "peak_lr": (1e-3, _NUM, "AdamW peak learning rate"),
        "warmup_steps": (500, {"type": "integer", "minimum": 0}, "linear warmup length"),
        "floor_lr": (1e-5, _NUM, "cosine floor"),
        "weight_decay": (1e-2, _NUM, "decoupled weight decay"),
        "betas": ([0.9, 0.999], _arr(_NUM, 2), "AdamW moment decays"),
        "eps": (1e-8, _NUM, "AdamW epsilon"),
        "clip_norm": (1.0, {"type": ["number", "null"]}, "global gradient clip; null disables"),
    },
    "loss": {
        "lambda_dice": (1.0, {"type": "number", "minimum": 0}, "soft Dice weight"),
        "dice_eps": (1.0, {"type": "number", "exclusiveMinimum": 0}, "soft Dice smoothing"),
    },
    "federation": {
        "seed": (0, _INT, "training seed (initialization, reshuffles, crops, noise)"),
        "aggregator": ("fedavg", {"enum": ["fedavg", "fedprox", "fedadam", "centralized"]}, "server rule"),
        "rounds": (30, {"type": "integer", "minimum": 1}, "communication rounds R"),
        "local_epochs": (1, {"type": "integer", "minimum": 1}, "local epochs per round"),
        "k_min": (3, {"type": "integer", "minimum": 1}, "minimum participants for a round to commit"),
        "prox_mu": (0.01, {"type": "number", "minimum": 0}, "FedProx proximal weight"),
        "server_lr": (1e-2, _NUM, "FedAdam server step"),
        "server_betas": ([0.9, 0.99], _arr(_NUM, 2), "FedAdam moment decays"),
        "adaptivity_tau": (1e-3, _NUM, "FedAdam denominator offset"),
        "participation": (1.0, _NUM, "fraction of clients invited per round"),
        "dropout": (0.0, _NUM, "per-client probability of not reporting"),
        "retries": (3, {"type": "integer", "minimum": 0}, "re-plans allowed after an aborted round"),
        "milestones": ([10, 20, 40], _arr(_INT), "extra checkpoint rounds (R is always added)"),
        "val_crops": (1, {"type": "integer", "minimum": 1}, "validation crops per page"),
        "workers": (1, {"type": "integer", "minimum": 1}, "client training processes"),
    },
    "privacy": {
        "secagg": (False, _BOOL, "pairwise-masked fixed-point aggregation"),
        "dp": (False, _BOOL, "central Gaussian noise on the aggregate"),
        "sigma": (0.6, _NUM, "noise multiplier"),
        "C": (1.0, _NUM, "update clipping bound"),
        "delta": (1e-5, _NUM, "target delta for reporting epsilon"),
    },
    "eval": {
        "seeds": ([0, 1, 2, 3, 4], _arr(_INT), "seeds per method"),
        "B": (10000, {"type": "integer", "minimum": 1}, "bootstrap replicates"),
        "level": (0.95, _NUM, "confidence level"),
        "alpha": (0.05, _NUM, "family-wise error rate for Holm"),
    },
    "digitize": {
        "bin_threshold": (0.5, _NUM, "probability threshold"),
        "min_component_area": (12, _INT, "smallest kept component (px)"),
        "open_radius": (0, _INT, "opening radius (px); 0 skips"),
        "max_gap": (6, _INT, "horizontal gap bridged by geodesic closing (px)"),
        "band_halfwidth": (12, _INT, "tracking band around the running centre (px)"),
        "run_gap": (2, _INT, "in-column gaps merged into one run (px)"),
        "resample_fs": (500.0, _NUM, "output sampling rate"),
        "savgol_window": (9, _INT, "smoothing window of the visual track (odd)"),
        "savgol_order": (3, _INT, "smoothing polynomial order"),
        "overlap": (0.5, _NUM, "tile overlap"),
    },
    "io": {
        "run_dir": ("runs/default", _STR, "run directory for `train`"),
    },
}


class ConfigError(ValueError):
    """Unknown, missing or ill-typed configuration entry."""


def defaults() -> dict:
    return {s: {k: copy.deepcopy(v[0]) for k, v in keys.items()} for s, keys in TABLE.items()}


def schema() -> dict:
    props = {}
    for s, keys in TABLE.items():
        props[s] = {"type": "object", "additionalProperties": False,
                    "properties": {k: v[1] for k, v in keys.items()}}
    return {"type": "object", "additionalProperties": False, "properties": props}


def _literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip().strip('"')


def parse_text(text: str) -> dict:
    """Read the ``[section]`` / ``key = value`` form into nested dicts."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return {s: {k: _literal(v) for k, v in cp.items(s)} for s in cp.sections()}


def load_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_text(text)


def resolve(user: dict | None = None) -> dict:
    """Defaults overlaid by ``user``; raises :class:`ConfigError` on any violation."""
    user = user or {}
    if not isinstance(user, dict):
        raise ConfigError("configuration must be a mapping of sections")
    out = defaults()
    for s, keys in user.items():
        if s not in TABLE:
            raise ConfigError(f"unknown section [{s}]")
        if not isinstance(keys, dict):
            raise ConfigError(f"section [{s}] must be a mapping")
        for k, v in keys.items():
            if k not in TABLE[s]:
                raise ConfigError(f"unknown key {s}.{k}")
            out[s][k] = v
    try:
        jsonschema.validate(out, schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path)
        raise ConfigError(f"{where}: {exc.message}") from None
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    user = load_file(path) if path else {}
    for s, keys in (overrides or {}).items():
        user.setdefault(s, {}).update(keys)
    return resolve(user)


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def render_text(cfg: dict | None = None) -> str:
    """The resolved configuration as an annotated text file."""
    cfg = cfg or defaults()
    lines = []
    for s, keys in TABLE.items():
        lines.append(f"[{s}]")
        for k, (_, _, note) in keys.items():
            lines.append(f"# {note}")
            lines.append(f"{k} = {json.dumps(cfg[s][k])}")
        lines.append("")
    return "\n".join(lines)
