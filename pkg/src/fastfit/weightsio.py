"""Tensor container: JSON header + flat little-endian float32 buffer.

Layout: 8-byte LE uint64 header length, UTF-8 JSON header with a free-form
"meta" object and a "tensors" list of {name, shape, offset} (offsets in
float32 elements), then the concatenated tensor data. The loader validates
the total element count against the file size.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class WeightsFormatError(ValueError):
    """Corrupt or inconsistent tensor container."""


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.tobytes())
    header = json.dumps(
        {"meta": meta or {}, "tensors": entries, "total_floats": offset},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise WeightsFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if len(raw) < 8 + hlen:
        raise WeightsFormatError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"{path}: bad JSON header: {exc}") from exc
    body = raw[8 + hlen :]
    total = header.get("total_floats", 0)
    if len(body) != 4 * total:
        raise WeightsFormatError(
            f"{path}: data length {len(body)} does not match {total} float32 values"
        )
    flat = np.frombuffer(body, dtype="<f4")
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + size > total:
            raise WeightsFormatError(f"{path}: tensor {entry['name']} overruns buffer")
        tensors[entry["name"]] = flat[start : start + size].reshape(shape).copy()
    return tensors, header.get("meta", {})
