"""Seed derivation and the explicit Gaussian sampler.

Every stochastic step in the package draws from a generator built by
:func:`make_rng`, keyed by a master seed plus a tuple of labels (client
name, record id, round index, ...).  Streams therefore do not depend on
call order, which keeps parallel and serial runs identical.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_words(keys) -> list[int]:
    h = hashlib.blake2b(repr(tuple(keys)).encode("utf-8"), digest_size=16)
    return [int.from_bytes(h.digest()[i:i + 4], "little") for i in range(0, 16, 4)]


def make_rng(seed: int, *keys) -> np.random.Generator:
    """PCG64 generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *_key_words(keys)])
    return np.random.Generator(np.random.PCG64(ss))


def derive_bytes(seed: int, *keys, n: int = 16) -> bytes:
    """Deterministic key material (used for pairwise mask seeds)."""
    h = hashlib.blake2b(repr((int(seed), *keys)).encode("utf-8"), digest_size=n)
    return h.digest()


def gaussian(rng: np.random.Generator, size: int) -> np.ndarray:
    """Standard normal draws by the Box-Muller transform.

    Uses only ``rng.random`` (53-bit uniforms), so the output is fixed by
    the PCG64 stream and not by numpy's internal normal sampler.
    """
    size = int(size)
    m = (size + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:size]
