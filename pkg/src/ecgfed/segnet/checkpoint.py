"""Binary checkpoints: a JSON header followed by raw little-endian float64.

File layout::

    b"ECGFEDCK"  8-byte magic
    uint64 LE    header length in bytes
    header       UTF-8 JSON: {"version", "arrays": [[name, shape], ...], "layout", "meta"}
    payload      every array in header order as '<f8', C order

The header is serialized with sorted keys, so equal inputs give equal bytes
on every platform.  Files are written to a temporary name and renamed into
place; a reader never sees a partial file.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .net import Layout

MAGIC = b"ECGFEDCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def dump_arrays(arrays: dict, layout: Layout | None = None, meta: dict | None = None) -> bytes:
    names = list(arrays)
    vals = [np.ascontiguousarray(np.asarray(arrays[k], dtype=np.float64)) for k in names]
    header = {
        "version": VERSION,
        "arrays": [[k, list(v.shape)] for k, v in zip(names, vals)],
        "layout": layout.to_json() if layout is not None else None,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(v.astype("<f8", copy=False).tobytes() for v in vals)
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def parse_arrays(blob: bytes):
    """Inverse of :func:`dump_arrays`: ``(arrays, layout_or_None, meta)``."""
    if blob[:8] != MAGIC:
        raise CheckpointError("not an ecgfed checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError("truncated header")
    (n,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    off = 16 + n
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(blob):
            raise CheckpointError(f"payload truncated inside {name!r}")
        arrays[name] = np.frombuffer(blob[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after payload")
    layout = Layout.from_json(header["layout"]) if header.get("layout") is not None else None
    return arrays, layout, header.get("meta", {})


def save_params(path, layout: Layout, params: np.ndarray, meta: dict | None = None) -> None:
    if params.shape != (layout.size,):
        raise ValueError(f"parameter vector has {params.size} values, layout expects {layout.size}")
    atomic_write_bytes(path, dump_arrays({"params": params}, layout, meta))


def load_params(path, expect: Layout | None = None):
    """Read ``(params, layout, meta)``; with ``expect`` the layouts must agree."""
    arrays, layout, meta = parse_arrays(Path(path).read_bytes())
    if "params" not in arrays or layout is None:
        raise CheckpointError(f"{path}: no parameter vector with layout")
    if expect is not None and layout != expect:
        raise CheckpointError(f"{path}: layout does not match the configured network")
    return arrays["params"], layout, meta
