"""AdamW with global-norm clipping and a warmup + cosine learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptConfig:
    peak_lr: float = 1e-3
    warmup_steps: int = 500
    floor_lr: float = 1e-5
    total_steps: int = 10_000
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0


@dataclass
class OptState:
    cfg: OptConfig
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def zeros(cls, n: int, cfg: OptConfig = OptConfig()) -> "OptState":
        return cls(cfg=cfg, m=np.zeros(n), v=np.zeros(n))

    def copy(self) -> "OptState":
        return OptState(self.cfg, self.m.copy(), self.v.copy(), self.step)


def lr_at(cfg: OptConfig, step: int) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay to ``floor_lr``.

    ``step`` counts updates from 1.
    """
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = min(max((step - cfg.warmup_steps) / span, 0.0), 1.0)
    return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0


def clip_by_global_norm(grad: np.ndarray, max_norm: float | None):
    """Return ``(clipped, pre_norm, scale)``."""
    norm = float(np.linalg.norm(grad))
    if max_norm is None or norm <= max_norm:
        return grad, norm, 1.0
    scale = max_norm / norm
    return grad * scale, norm, scale


def adamw_step(state: OptState, params: np.ndarray, grad: np.ndarray):
    """One clipped AdamW update; returns ``(new_params, new_state, info)``.

    The state passed in is not modified.
    """
    if grad.shape != params.shape:
        raise ValueError("grad layout does not match params")
    cfg = state.cfg
    g, pre_norm, scale = clip_by_global_norm(grad, cfg.clip_norm)
    b1, b2 = cfg.betas
    step = state.step + 1
    lr = lr_at(cfg, step)
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    new = params * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    info = {"lr": lr, "grad_norm": pre_norm, "clip_scale": scale}
    return new, OptState(cfg, m, v, step), info
