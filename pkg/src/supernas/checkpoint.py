"""Byte-deterministic checkpoint container.

Layout::

    MAGIC (8 bytes) | version (uint32 LE) | sha256 of body (32 bytes) | body
    body = header length (uint64 LE) | JSON header | raw array bytes

The JSON header holds the metadata document and, per array, its dtype,
shape and byte offset.  Keys are sorted and arrays are written in sorted
name order, so equal states always produce equal files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, UnsupportedCheckpoint

MAGIC = b"SNASCKPT"
VERSION = 1
_PREFIX = len(MAGIC) + 4 + 32


def dumps(arrays: dict, meta: dict) -> bytes:
    specs, chunks, off = {}, [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        b = a.tobytes()
        specs[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": off, "nbytes": len(b)}
        chunks.append(b)
        off += len(b)
    header = json.dumps({"meta": meta, "arrays": specs}, sort_keys=True, separators=(",", ":")).encode()
    body = struct.pack("<Q", len(header)) + header + b"".join(chunks)
    return MAGIC + struct.pack("<I", VERSION) + hashlib.sha256(body).digest() + body


def loads(blob: bytes) -> tuple[dict, dict]:
    if len(blob) < _PREFIX or blob[: len(MAGIC)] != MAGIC:
        raise ChecksumError("not a checkpoint or truncated header")
    (version,) = struct.unpack("<I", blob[len(MAGIC): len(MAGIC) + 4])
    if version != VERSION:
        raise UnsupportedCheckpoint(f"checkpoint version {version}, expected {VERSION}")
    digest = blob[len(MAGIC) + 4: _PREFIX]
    body = blob[_PREFIX:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (corrupt or truncated)")
    (hlen,) = struct.unpack("<Q", body[:8])
    header = json.loads(body[8: 8 + hlen])
    data = body[8 + hlen:]
    arrays = {}
    for name, sp in header["arrays"].items():
        raw = data[sp["offset"]: sp["offset"] + sp["nbytes"]]
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(sp["dtype"])).reshape(sp["shape"]).copy()
    return arrays, header["meta"]


def save(path, arrays: dict, meta: dict) -> str:
    """Write atomically; returns the sha256 hex digest of the file."""
    blob = dumps(arrays, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
