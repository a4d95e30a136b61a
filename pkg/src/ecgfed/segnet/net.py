"""Fixed tiny U-Net style segmenter over a flat parameter vector.

The encoder has ``depth`` levels of ``convs_per_level`` conv3x3-norm-SiLU
blocks joined by 2x2 average pooling.  Each decoder level upsamples
(nearest) and reduces channels with a 1x1 conv-norm-SiLU block (evaluated
before the upsampling, which it commutes with), concatenates the skip and
applies one 3x3 block.  A 1x1 head gives full-resolution logits; a second
1x1 head on the half-resolution decoder state gives the auxiliary logits
used for deep supervision.

Convolutions that feed an instance norm carry no bias (the norm removes
it); the two heads do.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import layers as L


@dataclass(frozen=True)
class NetConfig:
    depth: int = 3
    channels: tuple = (8, 16, 32)
    convs_per_level: int = 2
    deep_supervision_weights: tuple = (1.0, 0.5)
    patch: int = 128
    batch: int = 2
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "deep_supervision_weights",
                           tuple(float(w) for w in self.deep_supervision_weights))
        if self.depth < 2:
            raise ValueError("depth must be >= 2 (the auxiliary head sits at half resolution)")
        if len(self.channels) != self.depth:
            raise ValueError("need one channel count per level")
        if self.patch % (2 ** (self.depth - 1)):
            raise ValueError(f"patch {self.patch} not divisible by 2^(depth-1)")
        if len(self.deep_supervision_weights) != 2 or sum(self.deep_supervision_weights) <= 0:
            raise ValueError("deep_supervision_weights must be (main, aux) with positive sum")
        if self.batch < 1 or self.convs_per_level < 1:
            raise ValueError("batch and convs_per_level must be >= 1")

    @property
    def stride(self) -> int:
        return 2 ** (self.depth - 1)


@dataclass
class Layout:
    """Name -> (offset, shape) index into a flat parameter vector."""

    entries: dict = field(default_factory=dict)
    size: int = 0

    def add(self, name: str, shape: tuple) -> None:
        self.entries[name] = (self.size, tuple(shape))
        self.size += int(np.prod(shape))

    def view(self, vec: np.ndarray, name: str) -> np.ndarray:
        off, shape = self.entries[name]
        return vec[off:off + int(np.prod(shape))].reshape(shape)

    def names(self) -> list[str]:
        return list(self.entries)

    def to_json(self) -> list:
        return [[n, off, list(shape)] for n, (off, shape) in self.entries.items()]

    @classmethod
    def from_json(cls, items) -> "Layout":
        lay = cls()
        for name, off, shape in items:
            lay.entries[name] = (int(off), tuple(shape))
            lay.size = max(lay.size, int(off) + int(np.prod(shape)))
        return lay

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self.entries == other.entries


class SegNet:
    """Architecture bound to a :class:`NetConfig`; parameters live outside."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        self.cfg = cfg
        self.layout = Layout()
        self._blocks: list[tuple[str, int, int, int]] = []
        ch = cfg.channels
        cin = 1
        for lvl in range(cfg.depth):
            for i in range(cfg.convs_per_level):
                self._add_block(f"enc{lvl}.{i}", cin, ch[lvl], 3)
                cin = ch[lvl]
        for lvl in range(cfg.depth - 2, -1, -1):
            self._add_block(f"dec{lvl}.up", ch[lvl + 1], ch[lvl], 1)
            self._add_block(f"dec{lvl}.fuse", 2 * ch[lvl], ch[lvl], 3)
        self._aux_tap = "dec1.fuse" if cfg.depth >= 3 else f"enc1.{cfg.convs_per_level - 1}"
        self.layout.add("head.w", (1, ch[0]))
        self.layout.add("head.b", (1,))
        self.layout.add("aux.w", (1, ch[1]))
        self.layout.add("aux.b", (1,))

    def _add_block(self, name, cin, cout, k):
        self.layout.add(f"{name}.w", (cout, k * k * cin))
        self.layout.add(f"{name}.g", (cout,))
        self.layout.add(f"{name}.b", (cout,))
        self._blocks.append((name, cin, cout, k))

    @property
    def n_params(self) -> int:
        return self.layout.size

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """He-normal convolutions, unit norm gains, zero shifts and biases."""
        vec = np.zeros(self.layout.size)
        for name, cin, _, k in self._blocks:
            w = self.layout.view(vec, f"{name}.w")
            w[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / (k * k * cin))
            self.layout.view(vec, f"{name}.g")[...] = 1.0
        for head in ("head", "aux"):
            w = self.layout.view(vec, f"{head}.w")
            w[...] = rng.standard_normal(w.shape) * np.sqrt(1.0 / w.shape[1])
        return vec

    # -- forward / backward -------------------------------------------------

    def _block_fwd(self, params, name, x, k, need_dx=True):
        lay = self.layout
        w = lay.view(params, f"{name}.w")
        if k == 3:
            z, c_conv = L.conv3x3_fwd(x, w)
        else:
            z, c_conv = L.conv1x1_fwd(x, w)
        y, c_norm = L.norm_silu_fwd(z, lay.view(params, f"{name}.g"), lay.view(params, f"{name}.b"),
                                    self.cfg.norm_eps)
        return y, (name, k, c_conv, c_norm, need_dx)

    def _block_bwd(self, params, grad, dy, cache):
        name, k, c_conv, c_norm, need_dx = cache
        lay = self.layout
        dz, dg, db = L.norm_silu_bwd(dy, lay.view(params, f"{name}.g"), lay.view(params, f"{name}.b"),
                                     c_norm)
        lay.view(grad, f"{name}.g")[...] += dg
        lay.view(grad, f"{name}.b")[...] += db
        w = lay.view(params, f"{name}.w")
        if k == 3:
            dx, dw = L.conv3x3_bwd(dz, w, c_conv, need_dx)
        else:
            dx, dw, _ = L.conv1x1_bwd(dz, w, c_conv)
        lay.view(grad, f"{name}.w")[...] += dw
        return dx

    def logits(self, params: np.ndarray, images: np.ndarray, keep_cache: bool = False):
        """Main and auxiliary logits, ``(N, H, W)`` and ``(N, H/2, W/2)``."""
        cfg = self.cfg
        lay = self.layout
        x = images[None]
        caches = []
        skips = []
        first = True
        for lvl in range(cfg.depth):
            if lvl > 0:
                x = L.avgpool2_fwd(x)
                caches.append(("pool",))
            for i in range(cfg.convs_per_level):
                x, c = self._block_fwd(params, f"enc{lvl}.{i}", x, 3, need_dx=not first)
                first = False
                caches.append(("block", c))
            skips.append(x)
        aux_feat = x if cfg.depth == 2 else None
        for lvl in range(cfg.depth - 2, -1, -1):
            x, c = self._block_fwd(params, f"dec{lvl}.up", x, 1)
            caches.append(("block", c))
            x = L.upsample2_fwd(x)
            caches.append(("up",))
            x = np.concatenate([x, skips[lvl]], axis=0)
            caches.append(("cat", lvl, skips[lvl].shape[0]))
            x, c = self._block_fwd(params, f"dec{lvl}.fuse", x, 3)
            caches.append(("block", c))
            if lvl == 1:
                aux_feat = x
        z, c_head = L.conv1x1_fwd(x, lay.view(params, "head.w"), lay.view(params, "head.b"))
        za, c_aux = L.conv1x1_fwd(aux_feat, lay.view(params, "aux.w"), lay.view(params, "aux.b"))
        cache = (caches, c_head, c_aux) if keep_cache else None
        return z[0], za[0], cache

    def backward(self, params: np.ndarray, dz: np.ndarray, dza: np.ndarray, cache) -> np.ndarray:
        """Gradient of a scalar loss given d(loss)/d(main, aux logits)."""
        cfg = self.cfg
        lay = self.layout
        caches, c_head, c_aux = cache
        grad = np.zeros_like(params)
        dx, dw, db = L.conv1x1_bwd(dz[None], lay.view(params, "head.w"), c_head)
        lay.view(grad, "head.w")[...] += dw
        lay.view(grad, "head.b")[...] += db
        dxa, dw, db = L.conv1x1_bwd(dza[None], lay.view(params, "aux.w"), c_aux)
        lay.view(grad, "aux.w")[...] += dw
        lay.view(grad, "aux.b")[...] += db
        last_enc = f".{cfg.convs_per_level - 1}"
        dskips: dict[int, np.ndarray] = {}
        for entry in reversed(caches):
            kind = entry[0]
            if kind == "block":
                name = entry[1][0]
                if name == self._aux_tap:
                    dx = dx + dxa
                if name.startswith("enc") and name.endswith(last_enc):
                    lvl = int(name[3:].split(".")[0])
                    if lvl in dskips:
                        dx = dx + dskips.pop(lvl)
                dx = self._block_bwd(params, grad, dx, entry[1])
            elif kind == "cat":
                _, lvl, cs = entry
                dskips[lvl] = dx[-cs:]
                dx = dx[:-cs]
            elif kind == "up":
                dx = L.upsample2_bwd(dx)
            elif kind == "pool":
                dx = L.avgpool2_bwd(dx)
        return grad

    def check_input(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise ValueError(f"expected (H, W) or (N, H, W), got {x.shape}")
        p = self.cfg.patch
        if x.shape[1:] != (p, p):
            raise ValueError(f"patch must be {p}x{p}, got {x.shape[1]}x{x.shape[2]}")
        return x

    def forward(self, params: np.ndarray, patch: np.ndarray):
        """Probability maps ``(prob, aux_prob)`` for one patch or a batch."""
        x = self.check_input(patch)
        z, za, _ = self.logits(params, x)
        prob, aux = expit(z), expit(za)
        if np.ndim(patch) == 2:
            return prob[0], aux[0]
        return prob, aux
