"""Self-describing array container used for templates, dataset records and
attention exports.

Layout: 8-byte magic, little-endian u32 header length, a JSON header
(sorted keys) whose ``arrays`` entry lists ``name``/``shape``, then the arrays
back to back as little-endian float32.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

ARRAY_MAGIC = b"FLARRAY1"


def dumps(arrays: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    header = dict(header or {})
    names = list(arrays)
    header["arrays"] = [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names]
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [ARRAY_MAGIC, struct.pack("<I", len(hbytes)), hbytes]
    for n in names:
        parts.append(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())
    return b"".join(parts)


def loads(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:8] != ARRAY_MAGIC:
        raise ValueError("not an array container (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    off = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
    return header, arrays


def write(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> str:
    raw = dumps(arrays, header)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
