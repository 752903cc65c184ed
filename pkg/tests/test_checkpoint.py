"""Checkpoint serialization round-trip tests."""

from __future__ import annotations

import numpy as np
import pytest

from rgbdmesh.checkpoint import load_checkpoint, save_checkpoint


def test_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "w": rng.normal(size=(4, 7)),
        "b": rng.normal(size=7),
        "scalar": np.array(3.0),
        "third": rng.normal(size=(2, 3, 4)) * 1e-12,
    }
    path = tmp_path / "ck.json"
    save_checkpoint(path, arrays, meta={"step": 12})
    loaded, meta = load_checkpoint(path)
    assert meta == {"step": 12}
    assert set(loaded) == set(arrays)
    for k, a in arrays.items():
        assert loaded[k].shape == a.shape
        assert np.array_equal(loaded[k], a), k


def test_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"something": 1}')
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(path)


def test_creates_parent_directories(tmp_path):
    path = tmp_path / "a" / "b" / "ck.json"
    save_checkpoint(path, {"x": np.ones(2)})
    loaded, _ = load_checkpoint(path)
    assert np.array_equal(loaded["x"], np.ones(2))
