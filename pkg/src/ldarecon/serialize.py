"""Flat float64 array bundles with a JSON sidecar.

``save_arrays(path, arrays, meta)`` writes ``path.bin`` (little-endian
IEEE-754 float64 values, arrays concatenated in order, C order) and
``path.json`` describing each array's name, shape and offset (in values).
Round trips are bit-exact.
"""
import json
from pathlib import Path

import numpy as np

from ldarecon.errors import InvalidData

SCHEMA = 1
_DTYPE = np.dtype("<f8")


def _paths(path):
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".bin"), path.with_name(path.name + ".json")


def save_arrays(path, arrays, meta=None):
    bin_path, json_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPE).ravel())
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=_DTYPE)
    bin_path.write_bytes(flat.tobytes())
    sidecar = {
        "schema": SCHEMA,
        "dtype": "float64",
        "byte_order": "little",
        "count": int(offset),
        "arrays": entries,
        "meta": meta or {},
    }
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return bin_path, json_path


def load_arrays(path):
    """Return ``(arrays, meta)`` written by :func:`save_arrays`."""
    bin_path, json_path = _paths(path)
    sidecar = json.loads(json_path.read_text())
    if sidecar.get("schema") != SCHEMA or sidecar.get("byte_order") != "little":
        raise InvalidData(f"{json_path}: unsupported sidecar {sidecar.get('schema')!r}")
    flat = np.frombuffer(bin_path.read_bytes(), dtype=_DTYPE)
    if flat.size != sidecar["count"]:
        raise InvalidData(f"{bin_path}: expected {sidecar['count']} values, found {flat.size}")
    arrays = {}
    for entry in sidecar["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        chunk = flat[entry["offset"]:entry["offset"] + size]
        arrays[entry["name"]] = chunk.astype(np.float64).reshape(shape)
    return arrays, sidecar["meta"]
