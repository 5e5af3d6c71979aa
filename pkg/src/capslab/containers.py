"""Single-file binary container for named float64 tensors plus JSON metadata.

Layout (all integers little-endian):

    bytes 0..7   magic ``CAPSTNSR``
    bytes 8..11  format version (u32) == 1
    bytes 12..19 header length in bytes (u64)
    header       UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape"}]}
    payload      for each listed tensor, its raw row-major float64 values

Used both for network checkpoints (meta = network spec echo) and for
raw-tensor dataset files (meta = dataset description, tensors = images and
labels)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"CAPSTNSR"
VERSION = 1


def save_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f8").tobytes())
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True)
    raw = header.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(VERSION.to_bytes(4, "little"))
        fh.write(len(raw).to_bytes(8, "little"))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataFormatError(
            f"{path}: bad container magic {data[:8]!r}, expected {MAGIC!r}"
        )
    version = int.from_bytes(data[8:12], "little")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    hlen = int.from_bytes(data[12:20], "little")
    if 20 + hlen > len(data):
        raise DataFormatError(f"{path}: truncated header")
    header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    offset = 20 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise DataFormatError(
                f"{path}: truncated payload for tensor {entry['name']!r}"
            )
        arr = np.frombuffer(data[offset : offset + nbytes], dtype="<f8")
        tensors[entry["name"]] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise DataFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return header["meta"], tensors
