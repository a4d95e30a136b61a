"""``ecgfed`` command line: render, train, digitize, eval, accountant.

Every subcommand accepts ``--config``, ``--seed``, ``--out`` and ``--force``.
Success exits 0; any failure exits non-zero and prints one JSON object
``{"error": <type>, "message": <text>}`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .. import raster
from ..digitize import digitize_page, vectorize_mask
from ..dpcore import calibrate_sigma, epsilon_for
from ..fedcore import run_experiment
from ..segnet import SegNet
from ..segnet.checkpoint import load_params
from ..synthgen import CalibrationMeta, build_dataset
from . import config as C
from .compare import compare_runs, table_csv
from .runs import (load_clients, net_config, opt_config, fed_config, prepare_dir, privacy_config,
                   profiles_from, run_manifest, vectorize_params, write_json, code_version)


def _resolved(args, seed_key) -> dict:
    overrides = {}
    if args.seed is not None and seed_key:
        overrides[seed_key[0]] = {seed_key[1]: args.seed}
    return C.load(args.config, overrides)


def cmd_render(args) -> dict:
    cfg = _resolved(args, ("dataset", "seed"))
    ds = cfg["dataset"]
    out = prepare_dir(args.out or ds["root"], args.force, "dataset")
    profiles, overrides = profiles_from(cfg)
    man = build_dataset(out, profiles, {p.name: p.n_pages for p in profiles}, ds["seed"], ds["fs"],
                        workers=ds["workers"])
    man.update(config=cfg, config_hash=C.config_hash(cfg), code_version=code_version(),
               profile_overrides=overrides)
    write_json(out / "manifest.json", man)
    return {"dataset": str(out), "pages": len(man["records"]), "counts": man["counts"]}


def cmd_train(args) -> dict:
    cfg = _resolved(args, ("federation", "seed"))
    root = Path(cfg["dataset"]["root"])
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"dataset manifest not found: {root / 'manifest.json'} (run `ecgfed render` first)")
    fed, opt, priv = fed_config(cfg), opt_config(cfg), privacy_config(cfg)
    model = SegNet(net_config(cfg))
    out = Path(args.out or cfg["io"]["run_dir"])
    stamp = out / "config.json"
    resuming = (out / "state.bin").is_file() and stamp.is_file() and not args.force
    if resuming:
        if json.loads(stamp.read_text()).get("config_hash") != C.config_hash(cfg):
            raise FileExistsError(f"{out} holds a run with a different configuration (use --force to replace it)")
    else:
        prepare_dir(out, args.force, "run")
        write_json(stamp, {"config_hash": C.config_hash(cfg), "config": cfg})
    clients, val = load_clients(root, "train"), load_clients(root, "val")
    log = (lambda s: print(s, file=sys.stderr, flush=True)) if args.verbose else None
    res = run_experiment(model, clients, fed, out, opt, priv, cfg["federation"]["seed"], val,
                         resume=resuming, lambda_dice=cfg["loss"]["lambda_dice"],
                         dice_eps=cfg["loss"]["dice_eps"], log=log)
    man = run_manifest(cfg, res, priv, root)
    write_json(out / "manifest.json", man)
    return {"run": str(out), "resumed_from": res.resumed_from, "final_metrics": man["final_metrics"],
            "privacy": man["privacy"]}


def cmd_digitize(args) -> dict:
    cfg = _resolved(args, None)
    if args.image is None or args.calib is None:
        raise ValueError("digitize needs --image and --calib")
    for label, p in (("image", args.image), ("calib", args.calib), ("model", args.model), ("mask", args.mask)):
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"{label} file not found: {p}")
    meta = json.loads(Path(args.calib).read_text())
    calib = CalibrationMeta.from_dict(meta.get("calib", meta))
    image = raster.read_pgm(args.image)
    p = vectorize_params(cfg)
    if args.mask is not None:
        sig, viz = vectorize_mask(raster.read_mask_pgm(args.mask), calib, p, image=image)
    elif args.model is not None:
        model = SegNet(net_config(cfg))
        params, _, _ = load_params(args.model, model.layout)
        res = digitize_page(model, params, image, calib, p, overlap=cfg["digitize"]["overlap"])
        sig, viz = res.signal, res.visual
    else:
        raise ValueError("digitize needs --model (trained checkpoint) or --mask (bypass the network)")
    out = Path(args.out or "leads.csv")
    sig.to_csv(out)
    if args.visual:
        viz.to_csv(args.visual)
    return {"signal": str(out), "samples": int(sig.data.shape[1]),
            "observed_fraction": float(np.mean(sig.observed)) if sig.observed is not None else 1.0}


def cmd_eval(args) -> dict:
    cfg = _resolved(args, None)
    if len(args.runs) != 2:
        raise ValueError("eval compares exactly two run directories")
    e = cfg["eval"]
    seed = args.seed if args.seed is not None else cfg["federation"]["seed"]
    res = compare_runs(args.runs[0], args.runs[1], B=e["B"], level=e["level"], alpha=e["alpha"], seed=seed)
    text = table_csv(res)
    if args.out:
        write_json(Path(args.out), res)
    sys.stdout.write(text)
    return {}


def cmd_accountant(args) -> dict:
    if args.delta is None or args.rounds is None:
        raise ValueError("accountant needs --rounds and --delta")
    if args.target_epsilon is not None:
        sigma = calibrate_sigma(args.target_epsilon, args.delta, args.rounds)
        eps, alpha = epsilon_for(sigma, args.rounds, args.delta, return_alpha=True)
        return {"sigma": sigma, "epsilon": eps, "alpha": alpha, "rounds": args.rounds, "delta": args.delta}
    if args.sigma is None:
        raise ValueError("accountant needs --sigma (or --target-epsilon)")
    eps, alpha = epsilon_for(args.sigma, args.rounds, args.delta, return_alpha=True)
    return {"sigma": args.sigma, "rounds": args.rounds, "delta": args.delta, "epsilon": eps, "alpha": alpha}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (sections of key = value, or JSON)")
    common.add_argument("--seed", type=int, help="override the seed of this stage")
    common.add_argument("--out", help="output path")
    common.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
    ap = argparse.ArgumentParser(prog="ecgfed", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("render", parents=[common], help="render the synthetic multi-site dataset")
    sub.add_parser("train", parents=[common], help="federated or centralized training run")
    d = sub.add_parser("digitize", parents=[common], help="page image to 12-lead CSV")
    d.add_argument("--image", help="page PGM")
    d.add_argument("--calib", help="page meta.json (or bare calibration JSON)")
    d.add_argument("--model", help="parameter checkpoint")
    d.add_argument("--mask", help="binary mask PGM; bypasses the network")
    d.add_argument("--visual", help="also write the smoothed display track here")
    e = sub.add_parser("eval", parents=[common], help="paired statistics between two runs")
    e.add_argument("runs", nargs="*", help="two run directories (A B); deltas are A - B")
    a = sub.add_parser("accountant", parents=[common], help="(epsilon, delta) for the central Gaussian mechanism")
    a.add_argument("--sigma", type=float)
    a.add_argument("--rounds", type=int)
    a.add_argument("--delta", type=float)
    a.add_argument("--target-epsilon", type=float, help="solve for sigma instead")
    return ap


COMMANDS = {"render": cmd_render, "train": cmd_train, "digitize": cmd_digitize, "eval": cmd_eval,
            "accountant": cmd_accountant}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            print(json.dumps({"error": "UsageError", "message": "invalid command line"}), file=sys.stderr)
        return int(exc.code or 0)
    try:
        out = COMMANDS[args.command](args)
    except Exception as exc:  # every failure becomes one JSON line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, (C.ConfigError, FileNotFoundError, FileExistsError, ValueError)) else 1
    if out:
        print(json.dumps(out, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
