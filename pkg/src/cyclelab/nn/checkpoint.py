"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CYLB"                      magic
    uint32                       format version
    uint64                       header length in bytes
    header                       UTF-8 JSON: {"metadata": ..., "tensors": [{name, shape, offset, count}]}
    payload                      tensors as contiguous little-endian float64

Values are written with ``<f8`` so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CYLB"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def architecture_hash(shapes: dict[str, tuple[int, ...]], arch: dict | None = None) -> str:
    payload = json.dumps(
        {"shapes": {k: list(v) for k, v in sorted(shapes.items())}, "arch": arch or {}}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size * 8
    header = json.dumps({"metadata": metadata, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=e["count"], offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return tensors, header["metadata"]
