"""``.ctckpt`` files: an 8-byte little-endian header length, a UTF-8 JSON header,
then the concatenated little-endian float32 payloads.

The header is ``{"format": "ctckpt", "version": 1, "config": {...},
"tensors": [{"name", "shape", "offset"}, ...], "meta": {...}}`` where
``offset`` is the byte offset of a tensor's payload relative to the end of
the header.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

EXTENSION = ".ctckpt"
_LE_F32 = np.dtype("<f4")


def save_checkpoint(path, tensors, config=None, meta=None):
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=_LE_F32)  # tobytes() is C-order; keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {"format": "ctckpt", "version": 1, "config": config or {},
              "tensors": entries, "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(tensors, header)``; tensors are float32 arrays keyed by name."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ContractError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContractError(f"{path}: malformed checkpoint header") from exc
    if header.get("format") != "ctckpt":
        raise ContractError(f"{path}: not a ctckpt file")
    base = 8 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        end = start + 4 * count
        if end > len(data):
            raise ContractError(f"{path}: payload for {entry['name']} is truncated")
        tensors[entry["name"]] = np.frombuffer(data[start:end], dtype=_LE_F32).astype(np.float32).reshape(shape)
    return tensors, header
