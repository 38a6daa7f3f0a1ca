"""Tensor container: JSON header followed by raw little-endian float32 payloads.

Layout::

    b"JEPALAB\\0"            8-byte magic
    uint64 (little-endian)   header length in bytes
    header                   UTF-8 JSON, sorted keys, no whitespace
    payload                  tensors back to back in header order

The header carries ``format_version``, free-form ``meta`` and a ``tensors``
directory of ``{name, shape, offset, nbytes}`` entries with offsets relative
to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"JEPALAB\0"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def _as_f32(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value, dtype="<f4")


def encode(meta: Mapping, tensors: Mapping[str, object]) -> bytes:
    arrays = OrderedDict((name, _as_f32(v)) for name, v in tensors.items())
    directory, offset = [], 0
    for name, arr in arrays.items():
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {"format_version": FORMAT_VERSION, "meta": meta, "tensors": directory}
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(head)), head, *(a.tobytes() for a in arrays.values())])


def decode(blob: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if blob[:8] != MAGIC:
        raise ContainerError("not a jepalab container (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {header.get('format_version')}")
    base = 16 + n
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ContainerError(f"truncated payload for tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return header["meta"], tensors


def save(path: str | Path, meta: Mapping, tensors: Mapping[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(meta, tensors))
    os.replace(tmp, path)
    return path


def load(path: str | Path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"container {path} does not exist")
    return decode(path.read_bytes())
