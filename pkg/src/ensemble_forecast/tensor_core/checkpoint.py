"""Flat binary container of named float64 tensors plus a JSON manifest.

Layout (all integers little-endian)::

    b"EFCK" | u32 version | u32 count
    count x ( u32 name_len | utf-8 name | u32 ndim | ndim x u64 dim | f64[] data )

The manifest sits next to the container as ``<stem>.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import DataError

MAGIC = b"EFCK"
VERSION = 1


class CheckpointError(DataError):
    pass


def manifest_path(bin_path: str | Path) -> Path:
    return Path(bin_path).with_suffix(".json")


def write_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], manifest: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    shapes = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
        shapes.append({"name": name, "shape": list(arr.shape)})
    path.write_bytes(b"".join(parts))
    meta = {"format": "efck", "version": VERSION, "tensors": shapes}
    meta.update(manifest or {})
    manifest_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if off + 8 * size > len(buf):
                raise CheckpointError(f"{path} is truncated")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"{path} is truncated") from exc
    if off != len(buf):
        raise CheckpointError(f"{path} has {len(buf) - off} trailing bytes")
    mp = manifest_path(path)
    manifest = json.loads(mp.read_text()) if mp.exists() else {}
    return out, manifest
