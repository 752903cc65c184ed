"""Flat name -> float64 array checkpoints serialized as JSON.

JSON keeps checkpoints diffable and dependency-free; float64 values are
written with repr-level precision so a save/load round trip is exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "rgbdmesh-checkpoint-v1"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a dict of named float64 arrays (and optional JSON-safe metadata)."""
    payload = {
        "format": FORMAT,
        "meta": meta or {},
        "arrays": {
            name: {
                "shape": list(np.asarray(a).shape),
                "data": np.asarray(a, dtype=np.float64).ravel().tolist(),
            }
            for name, a in arrays.items()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays and metadata written by :func:`save_checkpoint`."""
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != FORMAT:
        raise ValueError(f"not a recognized checkpoint file: {path}")
    arrays = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["arrays"].items()
    }
    return arrays, payload.get("meta", {})
