"""Named-tensor container on disk.

Layout::

    b"TNNC" | version:u8 | manifest_len:u32le | manifest (JSON, utf-8) | payload

The manifest lists each tensor's name, dtype, shape and byte offset into the
payload, plus a free-form ``meta`` object. Tensors are stored little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}},
                          sort_keys=True).encode()
    return MAGIC + struct.pack("<BI", VERSION, len(manifest)) + manifest + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not a tensor checkpoint")
    version, mlen = struct.unpack("<BI", blob[4:9])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(blob[9:9 + mlen].decode())
    base = 9 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, manifest.get("meta", {})


def save(path, tensors, meta=None):
    Path(path).write_bytes(dumps(tensors, meta))


def load(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def estimator_meta(params: dict) -> dict:
    """JSON-safe copy of ``get_params()``: tuples become lists, dtypes names."""
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, type):
            v = np.dtype(v).name
        out[k] = v
    return out


def estimator_kwargs(meta: dict, tuples=()) -> dict:
    """Inverse of :func:`estimator_meta` for the keys listed in ``tuples``."""
    out = dict(meta)
    for k in tuples:
        if k in out:
            out[k] = tuple(out[k])
    if "dtype" in out:
        out["dtype"] = np.dtype(out["dtype"]).type
    return out
