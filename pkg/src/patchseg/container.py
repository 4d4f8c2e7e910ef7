"""Named-array container: a binary file holding {name -> ndarray}.

Layout:
    bytes 0..7    magic ``b"NARRAY1\\n"``
    bytes 8..15   little-endian uint64, byte length of the JSON manifest
    manifest      UTF-8 JSON: {"arrays": [{"name", "dtype", "shape"}, ...]}
    data          raw row-major (C-order) array bytes, concatenated in
                  manifest order

Used for feature dumps and training checkpoints.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

MAGIC = b"NARRAY1\n"

_ALLOWED_DTYPES = {"float64", "float32", "int64", "int32", "uint8"}


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write a {name -> ndarray} mapping to ``path``."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _ALLOWED_DTYPES:
            raise DataError(f"unsupported dtype {arr.dtype.name!r} for array {name!r}")
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    manifest = json.dumps({"arrays": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a container written by :func:`save_arrays`."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"container file not found: {path}")
    with open(path, "rb") as f:
        head = f.read(len(MAGIC))
        if head != MAGIC:
            raise DataError(f"malformed header in {path}: bad magic {head!r}")
        size_bytes = f.read(8)
        if len(size_bytes) != 8:
            raise DataError(f"malformed header in {path}: truncated manifest length")
        (manifest_len,) = struct.unpack("<Q", size_bytes)
        manifest_raw = f.read(manifest_len)
        if len(manifest_raw) != manifest_len:
            raise DataError(f"malformed header in {path}: truncated manifest")
        try:
            manifest = json.loads(manifest_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed header in {path}: {exc}") from exc
        if not isinstance(manifest, dict) or "arrays" not in manifest:
            raise DataError(f"malformed header in {path}: missing 'arrays' key")
        out: dict[str, np.ndarray] = {}
        for entry in manifest["arrays"]:
            try:
                name = entry["name"]
                dtype = entry["dtype"]
                shape = tuple(int(x) for x in entry["shape"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"malformed header in {path}: bad array entry {entry!r}") from exc
            if dtype not in _ALLOWED_DTYPES:
                raise DataError(f"malformed header in {path}: unsupported dtype {dtype!r}")
            nbytes = int(np.dtype(dtype).itemsize * np.prod(shape, dtype=np.int64))
            blob = f.read(nbytes)
            if len(blob) != nbytes:
                raise DataError(f"truncated data for array {name!r} in {path}")
            out[name] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
    return out


def load_matrix(path, name: str) -> np.ndarray:
    """Load one named array and require it to be rank 2."""
    arrays = load_arrays(path)
    if name not in arrays:
        raise DataError(f"array {name!r} not present in {path}")
    arr = arrays[name]
    if arr.ndim != 2:
        raise ShapeError(f"array {name!r} in {path} has rank {arr.ndim}, expected rank 2")
    return arr
