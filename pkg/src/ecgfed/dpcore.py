"""Central Gaussian mechanism and a Renyi-DP accountant.

Per round the Gaussian mechanism with noise multiplier ``sigma`` costs
``alpha / (2 sigma^2)`` at every order ``alpha``.  Rounds compose by adding
these curves; the (epsilon, delta) conversion minimizes
``rdp(alpha) + ln(1/delta) / (alpha - 1)`` over a fixed order grid and then
polishes the best grid point with a golden-section search.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import gaussian, make_rng

ALPHA_GRID = tuple([1.25, 1.5, 1.75, 2.0, 2.5] + [float(a) for a in range(3, 65)])
ALPHA_FLOOR = 1.0 + 1e-9
DEFAULT_DELTA = 1e-5


@dataclass(frozen=True)
class DpConfig:
    sigma: float = 0.6
    C: float = 1.0
    delta: float = DEFAULT_DELTA
    enabled: bool = True

    def __post_init__(self):
        if self.enabled:
            if not self.sigma > 0:
                raise ValueError("sigma must be > 0")
            if not 0 < self.delta < 1:
                raise ValueError("delta must lie in (0, 1)")
            if not self.C > 0:
                raise ValueError("C must be > 0")


@dataclass
class PrivacyLedger:
    """Append-only record of the mechanisms applied so far."""

    sigmas: list = field(default_factory=list)
    clips: list = field(default_factory=list)
    alphas: tuple = ALPHA_GRID

    @property
    def rounds_applied(self) -> int:
        return len(self.sigmas)

    def record(self, sigma: float, C: float) -> None:
        self.sigmas.append(float(sigma))
        self.clips.append(float(C))

    def rdp_coefficient(self) -> float:
        """Total RDP divided by alpha (the curve is linear in alpha)."""
        return sum(1.0 / (2.0 * s * s) for s in self.sigmas)

    def rdp(self, alpha: float) -> float:
        return alpha * self.rdp_coefficient()

    def to_dict(self, delta: float = DEFAULT_DELTA) -> dict:
        out = {"rounds_applied": self.rounds_applied, "sigma_history": list(self.sigmas),
               "C_history": list(self.clips), "delta": delta}
        if self.sigmas:
            eps, alpha = compose_and_convert(self, delta, return_alpha=True)
            out.update(epsilon=eps, alpha=alpha)
        return out


def rdp_of_gaussian(sigma: float, alpha: float) -> float:
    if not alpha > 1 or not sigma > 0:
        raise ValueError("need alpha > 1 and sigma > 0")
    return alpha / (2.0 * sigma * sigma)


def add_central_noise(aggregate: np.ndarray, cfg: DpConfig, seed: int, ledger: PrivacyLedger | None = None,
                      round_index: int = 0) -> np.ndarray:
    """Add i.i.d. N(0, (sigma C)^2) to every coordinate and log one round."""
    if not cfg.enabled:
        raise RuntimeError("central noise requested while DP is disabled")
    agg = np.asarray(aggregate, dtype=np.float64)
    noise = gaussian(make_rng(seed, "dp-noise", round_index), agg.size).reshape(agg.shape)
    if ledger is not None:
        ledger.record(cfg.sigma, cfg.C)
    return agg + cfg.sigma * cfg.C * noise


def _golden_min(f, lo: float, hi: float, tol: float = 1e-13):
    g = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * max(1.0, abs(a)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    x = (a + b) / 2.0
    return x, f(x)


def _eps_from_coefficient(coef: float, delta: float, alphas=ALPHA_GRID):
    log_inv = math.log(1.0 / delta)

    def f(a):
        return coef * a + log_inv / (a - 1.0)

    vals = [f(a) for a in alphas]
    k = int(np.argmin(vals))
    lo = alphas[k - 1] if k > 0 else ALPHA_FLOOR
    hi = alphas[k + 1] if k + 1 < len(alphas) else alphas[k]
    if hi <= alphas[k]:
        return vals[k], alphas[k]
    a, v = _golden_min(f, lo, hi)
    if v > vals[k]:
        return vals[k], alphas[k]
    return v, a


def compose_and_convert(ledger: PrivacyLedger, delta: float = DEFAULT_DELTA, return_alpha: bool = False):
    """Cumulative epsilon at ``delta`` for everything in ``ledger``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if ledger.rounds_applied == 0:
        raise ValueError("ledger is empty; no mechanism has been applied")
    eps, alpha = _eps_from_coefficient(ledger.rdp_coefficient(), delta, tuple(ledger.alphas))
    return (eps, alpha) if return_alpha else eps


def epsilon_for(sigma: float, rounds: int, delta: float = DEFAULT_DELTA, return_alpha: bool = False):
    led = PrivacyLedger()
    for _ in range(int(rounds)):
        led.record(sigma, 1.0)
    return compose_and_convert(led, delta, return_alpha)


def calibrate_sigma(target_eps: float, delta: float, rounds: int, lo: float = 0.1, hi: float = 100.0) -> float:
    """Smallest-error sigma in ``[lo, hi]`` whose epsilon equals ``target_eps``."""
    if not target_eps > 0:
        raise ValueError("target epsilon must be > 0")
    e_lo, e_hi = epsilon_for(lo, rounds, delta), epsilon_for(hi, rounds, delta)
    if not e_hi <= target_eps <= e_lo:
        raise ValueError(f"target eps {target_eps} outside [{e_hi:.6g}, {e_lo:.6g}] "
                         f"reachable for sigma in [{lo}, {hi}]")
    a, b = lo, hi
    for _ in range(200):
        mid = 0.5 * (a + b)
        e = epsilon_for(mid, rounds, delta)
        if abs(e - target_eps) <= 1e-9 * target_eps:
            return mid
        if e > target_eps:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)
