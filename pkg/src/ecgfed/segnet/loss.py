"""Compound BCE + soft-Dice loss, evaluated on logits."""
from __future__ import annotations

import numpy as np
from scipy.special import expit

DEFAULT_DICE_EPS = 1.0


def bce_with_logits(z: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Per-sample mean BCE for logits ``z`` and targets ``m``, shape (N, H, W)."""
    per_px = np.maximum(z, 0.0) - z * m + np.log1p(np.exp(-np.abs(z)))
    return per_px.mean(axis=(1, 2))


def soft_dice(p: np.ndarray, m: np.ndarray, eps: float) -> np.ndarray:
    """Per-sample soft Dice ``(2 sum(m p) + eps) / (sum m + sum p + eps)``."""
    num = 2.0 * np.sum(m * p, axis=(1, 2)) + eps
    den = np.sum(m, axis=(1, 2)) + np.sum(p, axis=(1, 2)) + eps
    return num / den


def compound_loss(z: np.ndarray, m: np.ndarray, lambda_dice: float = 1.0,
                  eps: float = DEFAULT_DICE_EPS):
    """Batch-mean of BCE + lambda*(1 - Dice_soft) and its gradient w.r.t. ``z``.

    Returns ``(loss, dz, parts)`` where ``parts`` holds the batch-mean BCE
    and soft Dice for logging.
    """
    n, h, w = z.shape
    m = m.astype(np.float64, copy=False)
    p = expit(z)
    bce = bce_with_logits(z, m)
    s_mp = np.sum(m * p, axis=(1, 2))
    num = 2.0 * s_mp + eps
    den = np.sum(m, axis=(1, 2)) + np.sum(p, axis=(1, 2)) + eps
    dice = num / den
    loss = float(np.mean(bce + lambda_dice * (1.0 - dice)))
    # d dice / d p = (2 m den - num) / den^2 ; dp/dz = p (1 - p)
    ddice_dp = (2.0 * m * den[:, None, None] - num[:, None, None]) / (den[:, None, None] ** 2)
    dz = (p - m) / (h * w) - lambda_dice * ddice_dp * p * (1.0 - p)
    dz /= n
    return loss, dz, {"bce": float(bce.mean()), "dice_soft": float(dice.mean())}


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """Half-resolution target: a coarse pixel is foreground if any child is."""
    n, h, w = mask.shape
    return mask.reshape(n, h // 2, 2, w // 2, 2).any(axis=(2, 4))


def loss_and_grad(model, params: np.ndarray, patch: np.ndarray, mask: np.ndarray,
                  lambda_dice: float = 1.0, dice_eps: float = DEFAULT_DICE_EPS):
    """Deep-supervised loss and its exact gradient with respect to ``params``.

    The full-resolution and half-resolution terms are combined with the
    model's ``deep_supervision_weights`` normalized to sum to one.
    """
    if dice_eps <= 0 or lambda_dice < 0:
        raise ValueError("need dice_eps > 0 and lambda_dice >= 0")
    x = model.check_input(patch)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    if m.shape != x.shape:
        raise ValueError(f"mask shape {m.shape} != patch shape {x.shape}")
    w_main, w_aux = model.cfg.deep_supervision_weights
    tot = w_main + w_aux
    w_main, w_aux = w_main / tot, w_aux / tot
    z, za, cache = model.logits(params, x, keep_cache=True)
    l_main, dz, parts = compound_loss(z, m, lambda_dice, dice_eps)
    l_aux, dza, _ = compound_loss(za, downsample_mask(m), lambda_dice, dice_eps)
    grad = model.backward(params, w_main * dz, w_aux * dza, cache)
    loss = w_main * l_main + w_aux * l_aux
    return loss, grad, {**parts, "loss_main": l_main, "loss_aux": l_aux}
