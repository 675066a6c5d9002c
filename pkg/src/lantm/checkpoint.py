"""Checkpoint files: a JSON header followed by raw float64 parameter blocks.

Layout::

    b"LANTMCK\\0"  |  uint64 LE header length  |  UTF-8 JSON header  |  blocks

Blocks are little-endian float64, concatenated in the order listed in the
header's ``params`` entry.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .machine import config_from_dict

MAGIC = b"LANTMCK\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], model_cfg, seed: int,
                    extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    header = {
        "format_version": FORMAT_VERSION,
        "model": model_cfg.to_dict(),
        "seed": int(seed),
        "params": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], Any, dict[str, Any]]:
    """Return (params, model config, header)."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off:off + n].decode())
    off += n
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if off + size > len(data):
            raise CheckpointError("truncated checkpoint")
        params[entry["name"]] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
        off += size
    if off != len(data):
        raise CheckpointError("trailing bytes after parameter blocks")
    return params, config_from_dict(header["model"]), header
