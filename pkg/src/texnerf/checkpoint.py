"""Versioned binary checkpoint: JSON header plus raw little-endian tensors.

Layout::

    b"TEXNERF-CKPT\\n"
    uint32 LE version
    uint64 LE header length
    header (UTF-8 JSON, sorted keys)
    tensor bytes, back to back in header order

Nothing time- or host-dependent is written, so saving the same state twice
gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"TEXNERF-CKPT\n"
VERSION = 1


def save(path, tensors, meta):
    """Write ``tensors`` (ordered name -> array) and JSON-able ``meta``."""
    index = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>=|"), "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load(path):
    """Return ``(tensors, meta)``."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValidationError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, pos)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(data[pos : pos + hlen])
    base = pos + hlen
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype("<" + entry["dtype"]) if entry["dtype"][0] in "fiuc" else np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=base + entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return tensors, header["meta"]
