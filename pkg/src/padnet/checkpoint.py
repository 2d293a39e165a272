"""Checkpoint container: magic, version, JSON header, raw little-endian bytes.

Layout::

    b"PADNETCK"            8 bytes
    version                u32 little-endian
    header length H        u64 little-endian
    header                 H bytes of UTF-8 JSON (sorted keys)
    payload                concatenated tensor bytes

Each header entry records ``name``, ``dtype``, ``shape``, ``offset`` (from the
start of the payload) and ``nbytes``.  Masks use dtype ``"bits"``: packed
little-endian bitsets of ``shape[0]`` entries.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"PADNETCK"
VERSION = 1
_PREFIX = len(MAGIC) + 4 + 8
_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "u1": "u1", "bits": "u1"}


class CheckpointError(ValueError):
    """Unreadable checkpoint; ``offset`` is the byte position of the problem."""

    def __init__(self, offset: int, message: str):
        super().__init__(f"checkpoint byte offset {offset}: {message}")
        self.offset = offset


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.bool_:
        return "bits"
    code = arr.dtype.str.lstrip("<>=|")
    if code not in _DTYPES:
        raise TypeError(f"unsupported checkpoint dtype {arr.dtype}")
    return code


def dumps(tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    """Serialise ``tensors`` (in insertion order) plus a JSON-able ``meta`` dict."""
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        if code == "bits":
            if arr.ndim != 1:
                raise ValueError(f"bit tensor {name!r} must be 1-D")
            raw = np.packbits(arr.astype(np.uint8), bitorder="little").tobytes()
        else:
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < _PREFIX:
        raise CheckpointError(len(blob), f"file shorter than the {_PREFIX}-byte preamble")
    if blob[:8] != MAGIC:
        raise CheckpointError(0, f"bad magic {blob[:8]!r}")
    version, hlen = struct.unpack("<IQ", blob[8:_PREFIX])
    if version != VERSION:
        raise CheckpointError(8, f"unsupported version {version}; this reader handles {VERSION}")
    if _PREFIX + hlen > len(blob):
        raise CheckpointError(12, f"header length {hlen} runs past end of file ({len(blob)} bytes)")
    try:
        header = json.loads(blob[_PREFIX:_PREFIX + hlen])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(_PREFIX, f"header is not a valid JSON index: {exc}") from None
    base = _PREFIX + hlen
    payload_len = len(blob) - base
    out: dict[str, np.ndarray] = {}
    expect = 0
    for e in entries:
        name, code, shape = e["name"], e["dtype"], tuple(e["shape"])
        if code not in _DTYPES:
            raise CheckpointError(_PREFIX, f"tensor {name!r} has unknown dtype {code!r}")
        count = int(np.prod(shape, dtype=np.int64))
        need = (count + 7) // 8 if code == "bits" else count * np.dtype(_DTYPES[code]).itemsize
        if e["nbytes"] != need or e["offset"] != expect:
            raise CheckpointError(base + e["offset"], f"tensor {name!r} index inconsistent with its shape")
        if e["offset"] + need > payload_len:
            raise CheckpointError(base + e["offset"], f"tensor {name!r} truncated: needs {need} bytes")
        raw = blob[base + e["offset"]: base + e["offset"] + need]
        if code == "bits":
            arr = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little", count=count).astype(bool)
        else:
            arr = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape).copy()
        out[name] = arr.reshape(shape)
        expect += need
    if expect != payload_len:
        raise CheckpointError(base + expect, f"{payload_len - expect} trailing bytes after last tensor")
    return out, header.get("meta", {})


def save(path, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> int:
    """Write atomically (temp file + rename); returns the byte size."""
    path = Path(path)
    blob = dumps(tensors, meta)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return len(blob)


def load(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())


def scalar_count(tensors: dict[str, np.ndarray], include_bits: bool = False) -> int:
    """Number of stored scalars; masks are bookkeeping and excluded by default."""
    return sum(int(np.asarray(a).size) for a in tensors.values()
               if include_bits or np.asarray(a).dtype != np.bool_)
