"""Checkpoint persistence: JSON manifest + one little-endian blob per array.

A checkpoint is a directory:
    manifest.json   format tag, user metadata, per-array name/shape/dtype/file
    p0000.bin ...   raw little-endian C-order bytes, one file per array
Round-trips are byte-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_TAG = "ckpt-v1"


def _le_dtype(dtype):
    dt = np.dtype(dtype)
    if dt.byteorder == ">":
        raise ValueError(f"big-endian array dtype {dt} not supported")
    return dt.newbyteorder("<")


def save_checkpoint(path, arrays, meta=None):
    """Write named arrays + metadata to directory `path` (created/overwritten)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(arrays.items()):
        arr = np.ascontiguousarray(arr)
        le = arr.astype(_le_dtype(arr.dtype), copy=False)
        fname = f"p{i:04d}.bin"
        (path / fname).write_bytes(le.tobytes())
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": str(_le_dtype(arr.dtype)), "file": fname}
        )
    manifest = {"format": FORMAT_TAG, "meta": meta or {}, "arrays": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path):
    """Read a checkpoint directory back into ({name: array}, meta)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"not a checkpoint: bad format tag in {path}")
    arrays = {}
    for entry in manifest["arrays"]:
        raw = (path / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()  # frombuffer is read-only
    return arrays, manifest["meta"]


def checkpoint_hash(path):
    """sha256 over the manifest and all blobs, stable across filesystems."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    h = hashlib.sha256()
    h.update(json.dumps(manifest, sort_keys=True).encode())
    for entry in manifest["arrays"]:
        h.update((path / entry["file"]).read_bytes())
    return h.hexdigest()
