"""Clipping, fixed-point ring encoding and pairwise one-time masking.

Updates are carried in the ring Z/2^64 at scale 2^24.  Each pair of
participants shares a 128-bit seed; AES-128 in counter mode keyed by that
seed (with the round index in the counter block) expands it into a mask
stream.  The lower-indexed client adds the stream and the higher-indexed one
subtracts it, so the masks vanish from the ring sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .rng import derive_bytes

SCALE_BITS = 24
SCALE = float(1 << SCALE_BITS)
# |w * value| must stay below this so K <= 2^38 contributions cannot wrap
MAX_ABS = float(1 << 39) / SCALE
K_MIN = 3


class ThresholdError(RuntimeError):
    """Fewer submissions than the participation threshold."""


@dataclass(frozen=True)
class ClipReport:
    client: int
    pre_norm: float
    scale: float

    @property
    def post_norm(self) -> float:
        return self.pre_norm * self.scale


def clip_update(delta: np.ndarray, C: float = 1.0, client: int = -1):
    """Scale ``delta`` onto the l2 ball of radius ``C`` if it lies outside."""
    if not C > 0:
        raise ValueError("clip bound C must be > 0")
    delta = np.asarray(delta, dtype=np.float64)
    norm = float(np.linalg.norm(delta))
    if norm > C:
        scale = C / norm
        return delta * scale, ClipReport(client, norm, scale)
    return delta.copy(), ClipReport(client, norm, 1.0)


def encode_fixed(v: np.ndarray, weight: float = 1.0) -> np.ndarray:
    """Round ``weight * v`` to the nearest multiple of 2^-24 and embed in the ring."""
    x = float(weight) * np.asarray(v, dtype=np.float64)
    if x.size and not np.all(np.abs(x) < MAX_ABS):
        raise OverflowError(f"|w*v| must be < {MAX_ABS:g} for fixed-point encoding")
    q = np.rint(x * SCALE).astype(np.int64)
    return q.view(np.uint64)


def decode_fixed(r: np.ndarray) -> np.ndarray:
    """Two's-complement reading of ring elements, divided by the scale."""
    return np.asarray(r, dtype=np.uint64).view(np.int64).astype(np.float64) / SCALE


@dataclass
class PairwiseSeeds:
    """One 128-bit seed per unordered client pair."""

    seeds: dict = field(default_factory=dict)

    @classmethod
    def setup(cls, clients, master_seed: int) -> "PairwiseSeeds":
        """Trusted-dealer stand-in: derive every pair seed from a master seed."""
        ids = sorted(int(c) for c in clients)
        out = {}
        for a, i in enumerate(ids):
            for j in ids[a + 1:]:
                out[(i, j)] = derive_bytes(master_seed, "pair", i, j, n=16)
        return cls(out)

    def get(self, i: int, j: int) -> bytes:
        key = (min(i, j), max(i, j))
        try:
            return self.seeds[key]
        except KeyError:
            raise KeyError(f"no pairwise seed for clients {key}") from None


def prg_stream(seed: bytes, round_index: int, dim: int) -> np.ndarray:
    """``dim`` ring elements from AES-128-CTR keyed by ``seed``.

    The initial counter block is ``round_index`` (8 bytes) followed by a zero
    block counter, so every round reads a fresh stream.
    """
    if len(seed) != 16:
        raise ValueError("pair seed must be 16 bytes")
    nonce = int(round_index).to_bytes(8, "big", signed=False) + bytes(8)
    enc = Cipher(algorithms.AES(seed), modes.CTR(nonce)).encryptor()
    raw = enc.update(bytes(8 * dim)) + enc.finalize()
    return np.frombuffer(raw, dtype="<u8").astype(np.uint64)


def mask_for(client: int, round_index: int, peers, seeds: PairwiseSeeds, dim: int) -> np.ndarray:
    """Signed sum of the pair streams ``client`` shares with every other peer."""
    peers = [int(p) for p in peers]
    if client not in peers:
        raise ValueError(f"client {client} is not among the participants")
    if len(peers) < 2:
        raise ValueError("masking needs at least two participants")
    mask = np.zeros(dim, dtype=np.uint64)
    for j in sorted(peers):
        if j == client:
            continue
        s = prg_stream(seeds.get(client, j), round_index, dim)
        if client < j:
            mask += s
        else:
            mask -= s
    return mask


def mask_update(encoded: np.ndarray, client: int, round_index: int, peers,
                seeds: PairwiseSeeds) -> np.ndarray:
    return encoded + mask_for(client, round_index, peers, seeds, encoded.shape[0])


def ring_sum(vectors) -> np.ndarray:
    vectors = list(vectors)
    dims = {v.shape for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"submissions have mismatched shapes {sorted(dims)}")
    total = np.zeros(vectors[0].shape, dtype=np.uint64)
    for v in vectors:
        total += v
    return total


def masked_sum(masked_updates, k_min: int = K_MIN) -> np.ndarray:
    """Ring-sum the masked submissions and decode, or refuse below ``k_min``."""
    masked_updates = list(masked_updates)
    if len(masked_updates) < k_min:
        raise ThresholdError(f"{len(masked_updates)} submissions < k_min={k_min}; nothing decoded")
    return decode_fixed(ring_sum(masked_updates))
