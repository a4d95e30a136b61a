"""Paired comparison of two training runs at their shared milestones."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..evalstats import bca_ci, hedges_g_paired, paired_t_holm
from ..fedcore import crop_dice, validation_crops
from ..segnet import SegNet
from ..segnet.checkpoint import load_params
from .config import resolve
from .runs import load_clients, net_config

TABLE_COLUMNS = ("milestone", "n_pages", "dice_a", "dice_b", "delta", "hedges_g", "ci_lower", "ci_upper",
                 "t", "p", "holm_reject")


def _manifest(run_dir) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"run manifest not found: {path}")
    return json.loads(path.read_text())


def page_dice(model, params, val: list, seed: int, per_page: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean crop Dice of every validation page and the client label of each page."""
    values, labels = [], []
    for v in val:
        x, m = validation_crops(v, model.cfg.patch, seed, per_page)
        d = crop_dice(model, params, x, m).reshape(len(v), per_page).mean(axis=1)
        values.append(d)
        labels += [v.name] * len(v)
    return np.concatenate(values), np.array(labels)


def compare_runs(run_a, run_b, B: int = 10_000, level: float = 0.95, alpha: float = 0.05, seed: int = 0) -> dict:
    """Delta, Hedges' g, stratified BCa interval and Holm-corrected t-tests per milestone.

    Both runs must share the dataset and network layout.  Pages are paired
    through identical validation crops (keyed by ``seed``).
    """
    ma, mb = _manifest(run_a), _manifest(run_b)
    if ma["dataset_root"] != mb["dataset_root"]:
        raise ValueError("runs were trained on different datasets")
    cfg_a, cfg_b = resolve(ma["config"]), resolve(mb["config"])
    if cfg_a["model"] != cfg_b["model"]:
        raise ValueError("runs use different network configurations")
    model = SegNet(net_config(cfg_a))
    val = load_clients(ma["dataset_root"], "val")
    per_page = cfg_a["federation"]["val_crops"]
    shared = sorted(set(ma["checkpoints"]) & set(mb["checkpoints"]), key=int)
    if not shared:
        raise ValueError("the runs share no milestone checkpoint")
    rows, diffs = [], {}
    for ms in shared:
        pa, _, _ = load_params(Path(run_a) / ma["checkpoints"][ms], model.layout)
        pb, _, _ = load_params(Path(run_b) / mb["checkpoints"][ms], model.layout)
        da, clients = page_dice(model, pa, val, seed, per_page)
        db, _ = page_dice(model, pb, val, seed, per_page)
        d = da - db
        diffs[f"R{ms}"] = d
        try:
            g = hedges_g_paired(d)
        except ValueError:
            g = None
        ci = bca_ci(da, clients, paired=db, B=B, level=level, seed=seed)
        rows.append({"milestone": f"R{ms}", "n_pages": int(d.size), "dice_a": float(da.mean()),
                     "dice_b": float(db.mean()), "delta": float(d.mean()), "hedges_g": g,
                     "ci_lower": ci.lower, "ci_upper": ci.upper})
    for row, test in zip(rows, paired_t_holm(diffs, alpha)):
        row.update(t=test.t, p=test.p, holm_reject=test.reject)
    return {"run_a": str(run_a), "run_b": str(run_b), "method_a": ma["method"], "method_b": mb["method"],
            "level": level, "B": B, "alpha": alpha, "rows": rows}


def table_csv(result: dict) -> str:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    lines = [",".join(TABLE_COLUMNS)]
    lines += [",".join(fmt(r[c]) for c in TABLE_COLUMNS) for r in result["rows"]]
    return "\n".join(lines) + "\n"
