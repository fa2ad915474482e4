"""Flat binary tensor files with JSON manifests.

One blob file holds the raw bytes of several named arrays back to back;
the manifest (same path + ".json") records offsets, shapes, dtypes, and any
caller metadata.  Writing is deterministic: identical arrays and metadata
produce identical bytes, which is what makes cache and checkpoint hashes
comparable across runs.
"""
from __future__ import annotations

import json

import numpy as np


def save_arrays(path: str, arrays: dict, meta: dict | None = None) -> None:
    entries = {}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        entries[name] = {"offset": offset, "shape": list(arr.shape), "dtype": arr.dtype.str}
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": 1, "meta": meta or {}, "entries": entries}
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_arrays(path: str) -> tuple[dict, dict]:
    """Returns (meta, name -> array)."""
    with open(path + ".json") as f:
        manifest = json.load(f)
    with open(path, "rb") as f:
        blob = f.read()
    arrays = {}
    for name, e in manifest["entries"].items():
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[name] = np.frombuffer(
            blob, dtype=dt, count=count, offset=e["offset"]
        ).reshape(e["shape"]).copy()
    return manifest["meta"], arrays
