"""CTEN binary tensor files and JSON weight manifests.

Layout: ``b"CTEN"``, u8 version (1), u8 dtype (0 = f32, 1 = f64), u8 rank,
u8 reserved (0), rank x u32 little-endian dims, then the little-endian
row-major payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CTEN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CtenError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise CtenError(f"CTEN stores float32/float64 only, got {array.dtype}")
    if array.ndim > 255:
        raise CtenError("rank above 255")
    code = _CODES[array.dtype]
    header = MAGIC + struct.pack("<BBBB", VERSION, code, array.ndim, 0)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CtenError("not a CTEN file (bad magic)")
    version, code, rank, _reserved = struct.unpack_from("<BBBB", blob, 4)
    if version != VERSION:
        raise CtenError(f"unsupported CTEN version {version}")
    if code not in _DTYPES:
        raise CtenError(f"unknown CTEN dtype code {code}")
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise CtenError("truncated CTEN header")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != offset + count * dtype.itemsize:
        raise CtenError(f"CTEN payload size mismatch for shape {shape}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_weights(directory, weights: Mapping[str, np.ndarray], extra: dict | None = None) -> Path:
    """Write one CTEN file per weight plus ``manifest.json`` mapping names to files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in weights.items():
        fname = name.replace("/", "_") + ".cten"
        save(directory / fname, np.asarray(arr))
        entries[name] = {"file": fname, "shape": list(np.shape(arr))}
    manifest = {"format": "CTEN", "version": VERSION, "weights": entries}
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_weights(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = {}
    for name, entry in manifest["weights"].items():
        arr = load(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise CtenError(f"{name}: file shape {arr.shape} disagrees with manifest {entry['shape']}")
        out[name] = arr
    return out
