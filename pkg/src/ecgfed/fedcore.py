"""Synchronous federated rounds, the three server rules and the pooled baseline.

A round broadcasts the global parameters, lets every participant train
locally, combines the results and commits a new :class:`ServerState`.
Without privacy FedAvg/FedProx use the parameter form ``sum_k w_k theta_k``
(bit-exact for a single client); with privacy the clipped deltas pass
through fixed-point secure aggregation and optional central noise.

Clients are stateful across rounds: each keeps its own AdamW moments and
step counter, so a one-client federation replays centralized training.
"""
from __future__ import annotations

import csv
import io
import math
import multiprocessing as mp
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import secagg
from .dpcore import DpConfig, PrivacyLedger, add_central_noise
from .rng import make_rng
from .segnet.checkpoint import atomic_write_bytes, dump_arrays, parse_arrays, save_params
from .segnet.loss import DEFAULT_DICE_EPS
from .segnet.optim import OptConfig, OptState
from .segnet.train import ClientData, local_train, sample_patch

AGGREGATORS = ("fedavg", "fedprox", "fedadam")
METHODS = AGGREGATORS + ("centralized",)
MILESTONES = (10, 20, 40)
CSV_VERSION_LINE = "# ecgfed-rounds v1"
CSV_COLUMNS = ("round", "client", "n_k", "weight", "preclip_norm", "postclip_norm", "mean_loss",
               "val_dice", "agg_norm", "noise_sigma", "attempt")


class RoundAborted(RuntimeError):
    """Too few participants; the server state was left untouched."""


class RunFailed(RuntimeError):
    """A round kept aborting beyond the retry budget."""


@dataclass(frozen=True)
class FedConfig:
    aggregator: str = "fedavg"
    rounds: int = 30
    local_epochs: int = 1
    k_min: int = 3
    prox_mu: float = 0.01
    server_lr: float = 1e-2
    server_betas: tuple = (0.9, 0.99)
    adaptivity_tau: float = 1e-3
    participation: float = 1.0
    dropout: float = 0.0
    retries: int = 3
    milestones: tuple = MILESTONES
    val_crops: int = 1
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "server_betas", tuple(float(b) for b in self.server_betas))
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.aggregator not in METHODS:
            raise ValueError(f"aggregator must be one of {METHODS}, got {self.aggregator!r}")
        if self.rounds < 1 or self.local_epochs < 1 or self.k_min < 1:
            raise ValueError("rounds, local_epochs and k_min must be >= 1")
        if self.prox_mu < 0 or self.server_lr <= 0 or self.adaptivity_tau <= 0:
            raise ValueError("need prox_mu >= 0, server_lr > 0, adaptivity_tau > 0")
        if len(self.server_betas) != 2 or not all(0 <= b < 1 for b in self.server_betas):
            raise ValueError("server_betas must be two values in [0, 1)")
        if not 0 < self.participation <= 1 or not 0 <= self.dropout < 1:
            raise ValueError("participation must lie in (0, 1] and dropout in [0, 1)")
        if self.retries < 0 or self.val_crops < 1 or self.workers < 1:
            raise ValueError("retries >= 0, val_crops >= 1, workers >= 1 required")

    def milestone_rounds(self) -> tuple:
        return tuple(sorted({m for m in self.milestones if 1 <= m <= self.rounds} | {self.rounds}))


@dataclass(frozen=True)
class PrivacyConfig:
    """Secure aggregation and central DP switches; clipping uses ``dp.C``."""

    secagg: bool = False
    dp: DpConfig = DpConfig(enabled=False)

    @property
    def active(self) -> bool:
        return self.secagg or self.dp.enabled


@dataclass(frozen=True)
class RoundPlan:
    round: int
    participants: tuple
    weights: tuple
    local_epochs: int
    aggregator: str
    k_min: int
    attempt: int = 0

    def validate(self) -> None:
        if len(self.participants) < self.k_min:
            raise RoundAborted(f"round {self.round}: {len(self.participants)} participants < k_min={self.k_min}")
        if len(self.weights) != len(self.participants) or any(w <= 0 for w in self.weights):
            raise ValueError("need one positive weight per participant")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {math.fsum(self.weights)!r}, not 1")


def make_plan(round_index: int, counts: dict, fed: FedConfig, seed: int, attempt: int = 0) -> RoundPlan:
    """Select participants (fraction, then independent dropout) and weight them by ``n_k / N``."""
    ids = sorted(counts)
    rng = make_rng(seed, "participation", round_index, attempt)
    if fed.participation < 1.0:
        k = max(1, math.ceil(fed.participation * len(ids)))
        ids = sorted(int(i) for i in rng.permutation(ids)[:k])
    if fed.dropout > 0:
        ids = [i for i in ids if rng.random() >= fed.dropout]
    total = sum(counts[i] for i in ids)
    weights = tuple(counts[i] / total for i in ids) if total else ()
    return RoundPlan(round_index, tuple(ids), weights, fed.local_epochs, fed.aggregator, fed.k_min, attempt)


@dataclass
class ServerState:
    global_params: np.ndarray
    fedadam_m: np.ndarray
    fedadam_v: np.ndarray
    server_lr: float = 1e-2
    server_betas: tuple = (0.9, 0.99)
    adaptivity_tau: float = 1e-3
    round: int = 0
    adam_steps: int = 0

    @classmethod
    def initial(cls, params: np.ndarray, fed: FedConfig = FedConfig()) -> "ServerState":
        z = np.zeros_like(params)
        return cls(params.copy(), z, z.copy(), fed.server_lr, fed.server_betas, fed.adaptivity_tau)

    def copy(self) -> "ServerState":
        return replace(self, global_params=self.global_params.copy(), fedadam_m=self.fedadam_m.copy(),
                       fedadam_v=self.fedadam_v.copy())


@dataclass
class RoundRecord:
    round: int
    attempt: int
    participants: list
    n_k: dict
    weights: dict
    preclip_norm: dict
    postclip_norm: dict
    mean_loss: dict
    agg_norm: float
    noise_sigma: float
    val_dice: float
    val_client: dict
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(**d)

    def csv_rows(self) -> list[list]:
        def f(x):
            return "" if x is None else repr(float(x))

        rows = []
        for name in self.participants:
            rows.append([self.round, name, self.n_k[name], f(self.weights[name]), f(self.preclip_norm[name]),
                         f(self.postclip_norm[name]), f(self.mean_loss[name]), f(self.val_client.get(name)),
                         "", "", self.attempt])
        rows.append([self.round, "global", sum(self.n_k.values()), f(1.0), "", "", "", f(self.val_dice),
                     f(self.agg_norm), f(self.noise_sigma), self.attempt])
        return rows


# -- server rules ------------------------------------------------------------

def agg_fedavg(global_params: np.ndarray, weighted_sum: np.ndarray) -> np.ndarray:
    """Delta form of FedAvg: ``theta + sum_k w_k delta_k``."""
    if global_params.shape != weighted_sum.shape:
        raise ValueError("weighted sum layout does not match the global parameters")
    return global_params + weighted_sum


def weighted_params(params: list, weights) -> np.ndarray:
    """Parameter form ``sum_k w_k theta_k``, accumulated in participant order."""
    out = weights[0] * params[0]
    for w, p in zip(weights[1:], params[1:]):
        out = out + w * p
    return out


def agg_fedadam(state: ServerState, g: np.ndarray) -> ServerState:
    """Bias-corrected server Adam step driven by the pseudo-gradient ``g``."""
    if g.shape != state.global_params.shape:
        raise ValueError("pseudo-gradient layout does not match the global parameters")
    b1, b2 = state.server_betas
    t = state.adam_steps + 1
    m = b1 * state.fedadam_m + (1.0 - b1) * g
    v = b2 * state.fedadam_v + (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    theta = state.global_params + state.server_lr * m_hat / (np.sqrt(v_hat) + state.adaptivity_tau)
    return replace(state, global_params=theta, fedadam_m=m, fedadam_v=v, adam_steps=t)


# -- validation --------------------------------------------------------------

def validation_crops(data: ClientData, size: int, seed: int, per_page: int = 1):
    """Fixed foreground-centred crops, ``(x, m)`` stacks keyed by ``(seed, client, page)``."""
    xs, ms = [], []
    for i in range(len(data)):
        rng = make_rng(seed, "val-crop", data.name, i)
        for _ in range(per_page):
            x, m = sample_patch(data, i, size, rng, fg_fraction=1.0)
            xs.append(x)
            ms.append(m)
    if not xs:
        return np.zeros((0, size, size)), np.zeros((0, size, size), dtype=bool)
    return np.stack(xs), np.stack(ms)


def crop_dice(model, params: np.ndarray, x: np.ndarray, m: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Hard Dice (probability > 0.5) of every crop; empty-vs-empty counts as 1."""
    out = np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        z, _, _ = model.logits(params, x[s:s + chunk])
        pred = z > 0.0
        gt = m[s:s + chunk]
        tp = np.sum(pred & gt, axis=(1, 2))
        den = np.sum(pred, axis=(1, 2)) + np.sum(gt, axis=(1, 2))
        out[s:s + chunk] = np.where(den == 0, 1.0, 2.0 * tp / np.maximum(den, 1))
    return out


def evaluate(model, params: np.ndarray, crops: dict, weights: dict):
    """Per-client mean crop Dice and their ``weights``-weighted global mean."""
    per = {name: float(crop_dice(model, params, x, m).mean()) for name, (x, m) in crops.items() if len(x)}
    if not per:
        return float("nan"), per
    names = list(per)
    w = np.array([weights[n] for n in names], dtype=np.float64)
    glob = float(np.sum(w * np.array([per[n] for n in names])) / np.sum(w))
    return glob, per


# -- orchestration -----------------------------------------------------------

def client_opt_config(base: OptConfig, n_pages: int, batch: int, epochs: int) -> OptConfig:
    """Stretch the cosine schedule over every step this client will take."""
    return replace(base, total_steps=max(epochs * math.ceil(n_pages / batch), 1))


_POOL_FED = None


def _pool_train(job):
    return _POOL_FED._train_one(*job)


class Federation:
    """Clients, their optimizer states and the privacy machinery of one run."""

    def __init__(self, model, clients: list, fed: FedConfig, opt: OptConfig = OptConfig(),
                 privacy: PrivacyConfig = PrivacyConfig(), seed: int = 0, val: list | None = None,
                 lambda_dice: float = 1.0, dice_eps: float = DEFAULT_DICE_EPS):
        if not clients:
            raise ValueError("need at least one client")
        idx = [c.index for c in clients]
        if len(set(idx)) != len(idx):
            raise ValueError("client indices must be unique")
        for c in clients:
            if len(c) == 0:
                raise ValueError(f"client {c.name!r} has no training data")
        self.model = model
        self.clients = {c.index: c for c in clients}
        self.fed = fed
        self.privacy = privacy
        self.seed = int(seed)
        self.lambda_dice = lambda_dice
        self.dice_eps = dice_eps
        epochs = fed.rounds * fed.local_epochs
        n = model.n_params
        self.opt_states = {c.index: OptState.zeros(n, client_opt_config(opt, len(c), model.cfg.batch, epochs))
                           for c in clients}
        self.ledger = PrivacyLedger()
        self.pair_seeds = (secagg.PairwiseSeeds.setup(idx, self.seed) if privacy.secagg else None)
        self.counts = {c.index: len(c) for c in clients}
        self.crops = {}
        if val:
            self.crops = {v.name: validation_crops(v, model.cfg.patch, self.seed, fed.val_crops) for v in val}
        names = {c.name: len(c) for c in clients}
        self.val_weights = {v.name: names.get(v.name, len(v)) for v in (val or [])}
        self._pool = None

    # local work
    def _train_one(self, k: int, params: np.ndarray, opt_state: OptState, epoch_index: int):
        mu = self.fed.prox_mu if self.fed.aggregator == "fedprox" else 0.0
        anchor = params if mu > 0 else None
        return local_train(self.model, params, opt_state, self.clients[k], seed=self.seed,
                           epoch_index=epoch_index, epochs=self.fed.local_epochs, prox_mu=mu,
                           prox_anchor=anchor, lambda_dice=self.lambda_dice, dice_eps=self.dice_eps)

    def _train_all(self, ks, params, epoch_index):
        jobs = [(k, params, self.opt_states[k], epoch_index) for k in ks]
        if self.fed.workers > 1 and len(jobs) > 1:
            if self._pool is None:
                global _POOL_FED
                _POOL_FED = self
                self._pool = mp.get_context("fork").Pool(min(self.fed.workers, len(self.clients)))
            return self._pool.map(_pool_train, jobs)
        return [self._train_one(*j) for j in jobs]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.close()
            self._pool.join()
            self._pool = None

    def run_round(self, state: ServerState, plan: RoundPlan):
        """Execute ``plan`` against ``state``; returns the new state and its record.

        Client optimizer states and the privacy ledger change only when the
        round commits.  Raises :class:`RoundAborted` (nothing mutated) when
        the plan has too few participants.
        """
        t0 = time.perf_counter()
        plan.validate()
        for k in plan.participants:
            if k not in self.clients:
                raise ValueError(f"unknown client {k}")
        theta = state.global_params
        results = self._train_all(plan.participants, theta, plan.round * plan.local_epochs)
        deltas = [p - theta for p, _, _ in results]
        names = [self.clients[k].name for k in plan.participants]
        pre = {n: float(np.linalg.norm(d)) for n, d in zip(names, deltas)}
        post = dict(pre)
        ledger = PrivacyLedger(list(self.ledger.sigmas), list(self.ledger.clips), self.ledger.alphas)
        noise = 0.0
        if self.privacy.active:
            C = self.privacy.dp.C
            encoded = []
            for k, n, w, d in zip(plan.participants, names, plan.weights, deltas):
                clipped, rep = secagg.clip_update(d, C, k)
                post[n] = rep.post_norm
                enc = secagg.encode_fixed(clipped, w)
                if self.privacy.secagg:
                    enc = secagg.mask_update(enc, k, plan.round, plan.participants, self.pair_seeds)
                encoded.append(enc)
            if self.privacy.secagg:
                g = secagg.masked_sum(encoded, max(plan.k_min, secagg.K_MIN))
            else:
                g = secagg.decode_fixed(secagg.ring_sum(encoded))
            if self.privacy.dp.enabled:
                g = add_central_noise(g, self.privacy.dp, self.seed, ledger, plan.round)
                noise = self.privacy.dp.sigma * C
            new = (agg_fedadam(state, g) if plan.aggregator == "fedadam"
                   else replace(state, global_params=agg_fedavg(theta, g)))
        elif plan.aggregator == "fedadam":
            new = agg_fedadam(state, weighted_params(deltas, plan.weights))
        else:
            new = replace(state, global_params=weighted_params([p for p, _, _ in results], plan.weights))
        new = replace(new, round=plan.round + 1)
        glob, per = evaluate(self.model, new.global_params, self.crops, self.val_weights) if self.crops \
            else (float("nan"), {})
        # commit
        for k, (_, st, _) in zip(plan.participants, results):
            self.opt_states[k] = st
        self.ledger = ledger
        rec = RoundRecord(
            round=plan.round + 1, attempt=plan.attempt, participants=names,
            n_k={n: self.counts[k] for k, n in zip(plan.participants, names)},
            weights=dict(zip(names, plan.weights)), preclip_norm=pre, postclip_norm=post,
            mean_loss={n: s["mean_loss"] for n, (_, _, s) in zip(names, results)},
            agg_norm=float(np.linalg.norm(new.global_params - theta)), noise_sigma=noise,
            val_dice=glob, val_client=per, wall_time=time.perf_counter() - t0,
        )
        return new, rec


# -- run directories ---------------------------------------------------------

@dataclass
class ExperimentResult:
    out_dir: Path
    state: ServerState
    records: list
    ledger: PrivacyLedger
    checkpoints: dict
    resumed_from: int = 0


def _csv_text(rows, header: bool) -> str:
    buf = io.StringIO()
    if header:
        buf.write(CSV_VERSION_LINE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


class _RunDir:
    """Round log, state snapshot and milestone checkpoints under one directory.

    A round is committed by appending its CSV rows and then atomically
    replacing ``state.bin``, which stores the committed CSV length.  On
    resume any CSV bytes past that length (a round killed mid-commit) are
    dropped.
    """

    def __init__(self, out_dir, layout):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.layout = layout
        self.csv = self.root / "rounds.csv"
        self.state = self.root / "state.bin"
        self.timing = self.root / "timing.csv"

    def load(self):
        if not self.state.exists():
            return None
        arrays, _, meta = parse_arrays(self.state.read_bytes())
        size = int(meta["csv_bytes"])
        with open(self.csv, "r+b") as fh:
            fh.truncate(size)
        return arrays, meta

    def commit(self, arrays: dict, meta: dict, rows: list, wall: float) -> None:
        first = not self.csv.exists() or self.csv.stat().st_size == 0
        with open(self.csv, "a", newline="") as fh:
            fh.write(_csv_text(rows, first))
            fh.flush()
            os.fsync(fh.fileno())
        meta = dict(meta, csv_bytes=self.csv.stat().st_size)
        atomic_write_bytes(self.state, dump_arrays(arrays, self.layout, meta))
        with open(self.timing, "a") as fh:
            fh.write(f"{meta['round']},{wall:.6f}\n")

    def checkpoint(self, r: int, params: np.ndarray, meta: dict) -> Path:
        path = self.root / f"ckpt_r{r:03d}.bin"
        save_params(path, self.layout, params, meta)
        return path


def _snapshot(state: ServerState, opt_states: dict):
    arrays = {"global": state.global_params, "fedadam_m": state.fedadam_m, "fedadam_v": state.fedadam_v}
    steps = {}
    for k, st in sorted(opt_states.items()):
        arrays[f"opt{k}.m"] = st.m
        arrays[f"opt{k}.v"] = st.v
        steps[str(k)] = st.step
    return arrays, steps


def run_experiment(model, clients: list, fed: FedConfig, out_dir, opt: OptConfig = OptConfig(),
                   privacy: PrivacyConfig = PrivacyConfig(), seed: int = 0, val: list | None = None,
                   init_params: np.ndarray | None = None, resume: bool = True, lambda_dice: float = 1.0,
                   dice_eps: float = DEFAULT_DICE_EPS, log=None) -> ExperimentResult:
    """Train for ``fed.rounds`` rounds, logging every round and checkpointing milestones.

    ``fed.aggregator == "centralized"`` trains on the pooled client data
    instead (see :func:`run_centralized`).  An existing ``state.bin`` in
    ``out_dir`` is resumed when ``resume`` is true.
    """
    if fed.aggregator == "centralized":
        return run_centralized(model, clients, fed, out_dir, opt, seed, val, init_params, resume,
                               lambda_dice, dice_eps, log)
    if privacy.secagg and fed.k_min < secagg.K_MIN:
        raise ValueError(f"secure aggregation needs k_min >= {secagg.K_MIN}")
    theta0 = model.init_params(make_rng(seed, "init")) if init_params is None else init_params.copy()
    federation = Federation(model, clients, fed, opt, privacy, seed, val, lambda_dice, dice_eps)
    state = ServerState.initial(theta0, fed)
    run = _RunDir(out_dir, model.layout)
    records, ckpts, start = [], {}, 0
    loaded = run.load() if resume else None
    if loaded is not None:
        arrays, meta = loaded
        state = ServerState(arrays["global"].copy(), arrays["fedadam_m"].copy(), arrays["fedadam_v"].copy(),
                            fed.server_lr, fed.server_betas, fed.adaptivity_tau, int(meta["round"]),
                            int(meta["adam_steps"]))
        for k in federation.opt_states:
            st = federation.opt_states[k]
            federation.opt_states[k] = OptState(st.cfg, arrays[f"opt{k}.m"].copy(), arrays[f"opt{k}.v"].copy(),
                                                int(meta["opt_steps"][str(k)]))
        federation.ledger = PrivacyLedger(list(meta["ledger"]["sigmas"]), list(meta["ledger"]["clips"]))
        records = [RoundRecord.from_dict(d) for d in meta["records"]]
        ckpts = {int(k): v for k, v in meta["checkpoints"].items()}
        start = state.round
    elif resume is False and run.state.exists():
        raise FileExistsError(f"{run.state} exists; refusing to overwrite without resume")
    milestones = set(fed.milestone_rounds())
    try:
        for r in range(start, fed.rounds):
            for attempt in range(fed.retries + 1):
                plan = make_plan(r, federation.counts, fed, seed, attempt)
                try:
                    state, rec = federation.run_round(state, plan)
                    break
                except RoundAborted as exc:
                    if log:
                        log(f"round {r + 1} attempt {attempt} aborted: {exc}")
            else:
                raise RunFailed(f"round {r + 1} aborted {fed.retries + 1} times (k_min={fed.k_min})")
            records.append(rec)
            if state.round in milestones:
                p = run.checkpoint(state.round, state.global_params, {"round": state.round, "method": fed.aggregator})
                ckpts[state.round] = p.name
            arrays, steps = _snapshot(state, federation.opt_states)
            meta = {"round": state.round, "adam_steps": state.adam_steps, "opt_steps": steps,
                    "ledger": {"sigmas": federation.ledger.sigmas, "clips": federation.ledger.clips},
                    "records": [x.to_dict() for x in records], "checkpoints": {str(k): v for k, v in ckpts.items()}}
            run.commit(arrays, meta, rec.csv_rows(), rec.wall_time)
            if log:
                log(f"round {state.round}/{fed.rounds} {fed.aggregator} val_dice={rec.val_dice:.4f}")
    finally:
        federation.close()
    return ExperimentResult(run.root, state, records, federation.ledger, ckpts, start)


def pool_clients(clients: list, name: str = "pooled") -> ClientData:
    """Concatenate client pages (in client order) into one index-0 data set."""
    return ClientData(name, 0, np.concatenate([c.images for c in clients]),
                      np.concatenate([c.masks for c in clients]))


def run_centralized(model, clients: list, fed: FedConfig, out_dir, opt: OptConfig = OptConfig(), seed: int = 0,
                    val: list | None = None, init_params: np.ndarray | None = None, resume: bool = True,
                    lambda_dice: float = 1.0, dice_eps: float = DEFAULT_DICE_EPS, log=None) -> ExperimentResult:
    """Pooled-data baseline with the same optimizer, seeds and epoch budget.

    One "round" is ``fed.local_epochs`` epochs over the pooled pages, so the
    log lines up with the federated runs.
    """
    data = clients[0] if len(clients) == 1 else pool_clients(clients)
    epochs = fed.rounds * fed.local_epochs
    cfg = client_opt_config(opt, len(data), model.cfg.batch, epochs)
    params = model.init_params(make_rng(seed, "init")) if init_params is None else init_params.copy()
    state = OptState.zeros(model.n_params, cfg)
    crops = {v.name: validation_crops(v, model.cfg.patch, seed, fed.val_crops) for v in (val or [])}
    sizes = {c.name: len(c) for c in clients}
    weights = {v.name: sizes.get(v.name, len(v)) for v in (val or [])}
    run = _RunDir(out_dir, model.layout)
    records, ckpts, start = [], {}, 0
    loaded = run.load() if resume else None
    if loaded is not None:
        arrays, meta = loaded
        params = arrays["global"].copy()
        state = OptState(cfg, arrays["opt0.m"].copy(), arrays["opt0.v"].copy(), int(meta["opt_steps"]["0"]))
        records = [RoundRecord.from_dict(d) for d in meta["records"]]
        ckpts = {int(k): v for k, v in meta["checkpoints"].items()}
        start = int(meta["round"])
    milestones = set(fed.milestone_rounds())
    zero = np.zeros(0)
    for r in range(start, fed.rounds):
        t0 = time.perf_counter()
        before = params
        params, state, stats = local_train(model, params, state, data, seed=seed, epoch_index=r * fed.local_epochs,
                                           epochs=fed.local_epochs, lambda_dice=lambda_dice, dice_eps=dice_eps)
        glob, per = evaluate(model, params, crops, weights) if crops else (float("nan"), {})
        norm = float(np.linalg.norm(params - before))
        rec = RoundRecord(r + 1, 0, [data.name], {data.name: len(data)}, {data.name: 1.0}, {data.name: norm},
                          {data.name: norm}, {data.name: stats["mean_loss"]}, norm, 0.0, glob, per,
                          time.perf_counter() - t0)
        records.append(rec)
        if r + 1 in milestones:
            ckpts[r + 1] = run.checkpoint(r + 1, params, {"round": r + 1, "method": "centralized"}).name
        arrays = {"global": params, "fedadam_m": zero, "fedadam_v": zero, "opt0.m": state.m, "opt0.v": state.v}
        meta = {"round": r + 1, "adam_steps": 0, "opt_steps": {"0": state.step},
                "ledger": {"sigmas": [], "clips": []}, "records": [x.to_dict() for x in records],
                "checkpoints": {str(k): v for k, v in ckpts.items()}}
        run.commit(arrays, meta, rec.csv_rows(), rec.wall_time)
        if log:
            log(f"epoch-round {r + 1}/{fed.rounds} centralized val_dice={glob:.4f}")
    z = np.zeros_like(params)
    final = ServerState(params, z, z.copy(), round=fed.rounds)
    return ExperimentResult(run.root, final, records, PrivacyLedger(), ckpts, start)


def read_round_csv(path) -> list[dict]:
    """Rows of a round log as dicts (the version comment line is checked and skipped)."""
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != CSV_VERSION_LINE:
            raise ValueError(f"{path}: unexpected header {first!r}")
        return list(csv.DictReader(fh))


__all__ = [
    "AGGREGATORS", "CSV_COLUMNS", "ExperimentResult", "FedConfig", "Federation", "PrivacyConfig", "RoundAborted",
    "RoundPlan", "RoundRecord", "RunFailed", "ServerState", "agg_fedadam", "agg_fedavg", "crop_dice", "evaluate",
    "make_plan", "pool_clients", "read_round_csv", "run_centralized", "run_experiment", "validation_crops",
    "weighted_params",
]
