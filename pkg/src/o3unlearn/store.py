"""Versioned binary container for named float64 arrays.

Layout::

    b"O3C\\x01" | u64 header length | UTF-8 JSON header | array payload | sha256

The header holds ``format`` (e.g. ``"o3-state-v1"``), free-form ``meta`` and a
record table ``[{name, shape, offset}]``. Arrays are stored little-endian
float64, C order. The trailing digest covers everything before it, so any
truncation or bit flip is caught on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"O3C\x01"
PARAMS_FORMAT = "o3-params-v1"
STATE_FORMAT = "o3-state-v1"


class ContainerError(ValueError):
    pass


def dump_container(path, fmt: str, records: dict[str, np.ndarray], meta: dict | None = None) -> None:
    table, chunks, offset = [], [], 0
    for name in sorted(records):
        arr = np.ascontiguousarray(np.asarray(records[name], dtype="<f8"))
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format": fmt, "meta": meta or {}, "records": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_container(path, fmt: str) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 + 32 or data[:4] != MAGIC:
        raise ContainerError(f"{path}: not an o3 container (bad magic or truncated)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch (file truncated or corrupted)")
    (hlen,) = struct.unpack("<Q", body[4:12])
    header = json.loads(body[12:12 + hlen].decode("utf-8"))
    if header.get("format") != fmt:
        raise ContainerError(f"{path}: version mismatch, expected {fmt!r}, found {header.get('format')!r}")
    payload = body[12 + hlen:]
    out = {}
    for rec in header["records"]:
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        start = rec["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        out[rec["name"]] = arr.reshape(rec["shape"]).astype(np.float64)
    return out, header["meta"]
