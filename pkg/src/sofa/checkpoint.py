"""SOFA-CKPT-1 checkpoint container.

Layout::

    b"SOFA-CKPT-1\\n"
    JSON manifest (utf-8, sorted keys) terminated by a NUL byte
    one blob of little-endian tensor values, concatenated in manifest order

The manifest carries ``tensors: [{name, shape, dtype, offset, nbytes}]`` with
``offset`` relative to the start of the blob, plus free-form ``kind``,
``config`` and ``meta`` entries.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"SOFA-CKPT-1\n"

_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(tensors: dict[str, np.ndarray], kind: str, config: dict,
                      meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        dtype = str(value.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for tensor {name!r}")
        raw = np.ascontiguousarray(value, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(value.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "SOFA-CKPT-1", "kind": kind, "config": config,
                "meta": meta or {}, "tensors": entries}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + header + b"\0" + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not data.startswith(MAGIC):
        raise CheckpointError("bad magic: not a SOFA-CKPT-1 file")
    end = data.find(b"\0", len(MAGIC))
    if end < 0:
        raise CheckpointError("manifest is not NUL-terminated")
    try:
        manifest = json.loads(data[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    blob = memoryview(data)[end + 1:]
    tensors = {}
    for entry in manifest["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"unsupported dtype {entry['dtype']!r}")
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(blob):
            raise CheckpointError(f"truncated blob while reading {entry['name']!r}")
        arr = np.frombuffer(blob[start:stop], dtype=dtype)
        if arr.size != int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"tensor {entry['name']!r} size does not match its shape")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return manifest, tensors


def write_checkpoint(path, tensors, kind, config, meta=None) -> str:
    """Write a checkpoint and return the sha256 of its bytes."""
    data = encode_checkpoint(tensors, kind, config, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())


def tensors_digest(tensors: dict[str, np.ndarray]) -> str:
    """Content hash over names, shapes and raw values, in iteration order."""
    h = hashlib.sha256()
    for name, value in tensors.items():
        h.update(name.encode())
        h.update(str(value.shape).encode())
        h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()
