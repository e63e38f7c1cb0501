"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic    4 bytes  b"MVCK"
    version  uint32
    hlen     uint64   length of the JSON header
    header   hlen bytes UTF-8 JSON: kind, config, fingerprint, meta, tensor index
    payload  concatenated little-endian IEEE-754 arrays

Each index entry is ``{"name", "dtype": "<f4"|"<f8", "shape", "offset", "nbytes"}``
with offsets relative to the start of the payload.
"""

import json
import struct
from pathlib import Path

import numpy as np

from mvecho.errors import CheckpointError

MAGIC = b"MVCK"
VERSION = 1


def save_checkpoint(path, kind, config, fingerprint, tensors, meta=None):
    """Write ``tensors`` (name -> ndarray) atomically to ``path``."""
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        index.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "config": config, "fingerprint": fingerprint, "meta": meta or {}, "tensors": index},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_header(path):
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
            version, hlen = struct.unpack("<IQ", fh.read(12))
            if version != VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
            header = json.loads(fh.read(hlen).decode("utf-8"))
            return header, 16 + hlen
    except (OSError, struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(header, tensors)``; ``tensors`` maps names to native-order arrays."""
    header, start = read_header(path)
    raw = Path(path).read_bytes()[start:]
    tensors = {}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, tensors
