"""Named-tensor container used for checkpoints.

Layout (all integers little-endian)::

    magic     4 bytes   b"TRTN"
    version   uint32    FORMAT_VERSION
    meta_len  uint32    length of the JSON header in bytes
    meta      JSON      {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload   raw little-endian element bytes, concatenated in header order

``dtype`` is a numpy type string (``"<f4"`` or ``"<f8"``); ``offset`` is
relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"TRTN"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        index.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": index}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    try:
        header = json.loads(blob[12 : 12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt container header: {exc}") from None
    payload = memoryview(blob)[12 + meta_len :]
    tensors = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise FormatError(f"tensor {entry['name']!r} truncated")
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(payload[start : start + n], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    return tensors, header["meta"]


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
