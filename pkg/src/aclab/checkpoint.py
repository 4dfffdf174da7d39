"""Binary parameter checkpoints.

Layout (little-endian): magic "ACLB1", uint32 header length, UTF-8 JSON
header, then the flat float64 parameter vector in declaration order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACLB1"


def save_checkpoint(path, kind, meta, flat_params):
    """Write a checkpoint; meta must be JSON-serializable."""
    flat = np.ascontiguousarray(flat_params, dtype="<f8")
    header = dict(meta)
    header["kind"] = kind
    header["param_count"] = int(flat.size)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(flat.tobytes())


def load_checkpoint(path):
    """Read a checkpoint, returning (kind, header dict, flat float64 params)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not an ACLB1 checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        flat = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    n = header.get("param_count")
    if n is not None and n != flat.size:
        raise ValueError(f"{path}: expected {n} parameters, found {flat.size}")
    return header.pop("kind"), header, flat


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
