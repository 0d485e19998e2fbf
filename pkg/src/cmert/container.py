"""Byte-deterministic array container used for streams and checkpoints.

Layout::

    b"CMRT"                      magic
    uint32 little-endian         format version
    uint64 little-endian         header length in bytes
    header                       UTF-8 JSON (sorted keys): {"kind", "meta", "arrays": [...]}
    payload                      arrays back to back, little-endian, C order

Each ``arrays`` entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with ``offset`` relative to the start of the payload.  No timestamps are
written, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMRT"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "int64": "<i8", "bool": "|b1"}


class ContainerError(ValueError):
    pass


def write_container(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise ContainerError(f"array {name!r}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a CMRT container")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    start = 16
    header = json.loads(raw[start:start + hlen])
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header['kind']!r}")
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        buf = raw[lo:lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ContainerError(f"{path}: truncated array {e['name']!r}")
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(e["dtype"], copy=True)
    return header["meta"], arrays
