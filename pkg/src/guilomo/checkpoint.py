"""Checkpoint persistence: a directory of flat binary arrays plus a manifest.

A checkpoint is self-describing: ``manifest.json`` embeds the full run
configuration (and, for final models, the allocation plan), so loading
needs no external files. Each named tensor lives in its own raw
little-endian float64 file, listed with shape and dtype in
``index.json``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

__all__ = ["SCHEMA_VERSION", "save_arrays", "load_arrays", "CheckpointError"]


class CheckpointError(ValueError):
    """A checkpoint directory is missing pieces or inconsistent."""


def save_arrays(path, arrays: dict[str, np.ndarray], manifest: dict) -> Path:
    """Write a checkpoint directory; overwrites files of the same names."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for slot, name in enumerate(sorted(arrays)):
        arr = np.asarray(arrays[name])
        fname = f"a{slot:05d}.bin"
        (out / fname).write_bytes(arr.astype("<f8").tobytes())
        index[name] = {"file": fname, "shape": list(arr.shape), "dtype": "float64"}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    doc = dict(manifest)
    doc.setdefault("schema_version", SCHEMA_VERSION)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint directory back into (manifest, named arrays)."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    index_path = root / "index.json"
    if not manifest_path.exists() or not index_path.exists():
        raise CheckpointError(f"{root}: not a checkpoint (missing manifest or index)")
    manifest = json.loads(manifest_path.read_text())
    index = json.loads(index_path.read_text())
    arrays = {}
    for name, entry in index.items():
        raw = (root / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        arrays[name] = arr.reshape(entry["shape"]).copy()
    return manifest, arrays
