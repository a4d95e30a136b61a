"""Client-local training: seeded reshuffle, patch sampling, clipped AdamW."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import make_rng
from .loss import DEFAULT_DICE_EPS, loss_and_grad
from .optim import OptState, adamw_step

FOREGROUND_FRACTION = 1.0 / 3.0


@dataclass
class ClientData:
    """Pages held by one site: normalized uint8 images and boolean masks."""

    name: str
    index: int
    images: np.ndarray  # (n, H, W) uint8
    masks: np.ndarray  # (n, H, W) bool

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, idx) -> "ClientData":
        idx = np.asarray(idx)
        return ClientData(self.name, self.index, self.images[idx], self.masks[idx])


def pad_to(img: np.ndarray, h: int, w: int, fill) -> np.ndarray:
    ph, pw = max(h - img.shape[0], 0), max(w - img.shape[1], 0)
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw)), constant_values=fill)


def sample_patch(data: ClientData, i: int, size: int, rng: np.random.Generator,
                 fg_fraction: float = FOREGROUND_FRACTION):
    """Crop one training patch from page ``i``.

    With probability ``fg_fraction`` the crop is centred on a random
    foreground pixel, otherwise its corner is uniform over the page.
    """
    img = pad_to(data.images[i], size, size, 255)
    msk = pad_to(data.masks[i], size, size, False)
    h, w = img.shape
    if rng.random() < fg_fraction:
        fg = np.flatnonzero(msk)
        if fg.size:
            k = fg[rng.integers(fg.size)]
            cy, cx = divmod(int(k), w)
            y0 = min(max(cy - size // 2, 0), h - size)
            x0 = min(max(cx - size // 2, 0), w - size)
        else:
            y0, x0 = int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))
    else:
        y0, x0 = int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))
    patch = img[y0:y0 + size, x0:x0 + size].astype(np.float64) / 255.0
    return patch, msk[y0:y0 + size, x0:x0 + size]


def local_train(model, params_in: np.ndarray, opt_state: OptState, data: ClientData, *,
                seed: int, epoch_index: int, epochs: int = 1, prox_mu: float = 0.0,
                prox_anchor: np.ndarray | None = None, lambda_dice: float = 1.0,
                dice_eps: float = DEFAULT_DICE_EPS):
    """Run ``epochs`` passes over ``data`` in batches of ``model.cfg.batch``.

    The page order of epoch ``e`` comes from ``(seed, data.index,
    epoch_index + e)``, so the same site replays the same draws under any
    aggregation rule.  With ``prox_mu > 0`` the gradient of
    ``prox_mu/2 * ||theta - prox_anchor||^2`` is added before clipping.

    Returns ``(params_out, opt_state_out, stats)``.
    """
    if len(data) == 0:
        raise ValueError(f"client {data.name!r} has no training data")
    if prox_mu < 0:
        raise ValueError("prox_mu must be >= 0")
    if prox_mu > 0:
        if prox_anchor is None or prox_anchor.shape != params_in.shape:
            raise ValueError("prox_anchor must match the parameter layout")
    params = params_in.copy()
    state = opt_state
    bs = model.cfg.batch
    size = model.cfg.patch
    losses, norms, scales = [], [], []
    for e in range(epochs):
        rng = make_rng(seed, "epoch", data.index, epoch_index + e)
        order = rng.permutation(len(data))
        for start in range(0, len(order), bs):
            batch = order[start:start + bs]
            pairs = [sample_patch(data, int(i), size, rng) for i in batch]
            x = np.stack([p for p, _ in pairs])
            m = np.stack([q for _, q in pairs])
            loss, grad, _ = loss_and_grad(model, params, x, m, lambda_dice, dice_eps)
            if prox_mu > 0:
                grad = grad + prox_mu * (params - prox_anchor)
            params, state, info = adamw_step(state, params, grad)
            losses.append(loss)
            norms.append(info["grad_norm"])
            scales.append(info["clip_scale"])
    stats = {
        "steps": len(losses),
        "loss": losses,
        "grad_norm": norms,
        "clip_scale": scales,
        "mean_loss": float(np.mean(losses)),
    }
    return params, state, stats
