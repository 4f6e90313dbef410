"""Flat archive of named float64 arrays plus a JSON manifest.

The archive is an uncompressed ``.npz``; the manifest is stored inside it
under ``__manifest__`` as UTF-8 bytes, listing name, shape and role
(``frozen`` or ``trainable``) for every array.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

MANIFEST_KEY = "__manifest__"
ROLES = ("frozen", "trainable")


def save_checkpoint(path: str | Path, frozen: list[tuple[str, Tensor]],
                    trainable: list[tuple[str, Tensor]]) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    manifest = []
    for role, items in (("frozen", frozen), ("trainable", trainable)):
        for name, t in items:
            if name in arrays or name == MANIFEST_KEY:
                raise ValueError(f"duplicate array name {name!r}")
            arrays[name] = np.asarray(t.data, dtype=np.float64)
            manifest.append({"name": name, "shape": list(t.shape), "role": role})
    blob = json.dumps(manifest, indent=1).encode()
    arrays[MANIFEST_KEY] = np.frombuffer(blob, dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[list[dict], dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as archive:
        manifest = json.loads(archive[MANIFEST_KEY].tobytes().decode())
        arrays = {entry["name"]: archive[entry["name"]] for entry in manifest}
    for entry in manifest:
        if entry["role"] not in ROLES:
            raise ValueError(f"bad role {entry['role']!r} for {entry['name']}")
        if list(arrays[entry["name"]].shape) != entry["shape"]:
            raise ValueError(f"shape mismatch for {entry['name']}")
    return manifest, arrays


def restore(tensors: list[tuple[str, Tensor]], arrays: dict[str, np.ndarray]) -> None:
    """Copy archived values into existing tensors, in place."""
    for name, t in tensors:
        if name not in arrays:
            raise KeyError(f"{name} missing from checkpoint")
        t.data[...] = arrays[name]
