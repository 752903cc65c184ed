"""Evaluation protocol: Procrustes alignment, MPJPE, ordinal accuracy, noise sweeps.

All point sets are in meters unless stated otherwise; reported errors are in
millimeters. Callers holding keypoints in a dataset's native convention should
map them through ``DatasetFrame.to_common`` before calling into this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .losses import DepthRankRelation

__all__ = [
    "AlignmentResult",
    "SweepGrid",
    "procrustes_align",
    "mpjpe",
    "reconstruction_error",
    "ordinal_accuracy",
    "noise_sweep",
]


@dataclass(frozen=True)
class AlignmentResult:
    """Similarity transform fitted by :func:`procrustes_align`.

    ``scale * rotation @ a + translation`` maps source points onto the target.
    ``residual_mm`` is the mean per-joint distance left after the transform.
    """

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residual_mm: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation


def mpjpe(a: np.ndarray, b: np.ndarray) -> float:
    """Mean per-joint position error in millimeters between two (k, 3) sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"mpjpe expects matching (k, 3) arrays, got {a.shape} and {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=1)) * 1000.0)


def procrustes_align(a: np.ndarray, b: np.ndarray, with_scale: bool = True) -> AlignmentResult:
    """Least-squares similarity alignment of ``a`` onto ``b``.

    Minimizes sum_i ||s R a_i + t - b_i||^2 over rotations R, translation t and,
    unless ``with_scale`` is false, a positive isotropic scale s. Closed form:
    center both sets, SVD of the cross-covariance with the determinant sign
    correction, scale from the trace ratio.

    Raises ValueError when ``a`` has fewer than 3 points or its centered rank
    is below 2 (coincident or collinear points admit no unique rotation).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"procrustes_align expects matching (k, 3) arrays, got {a.shape} and {b.shape}")
    if a.shape[0] < 3:
        raise ValueError(f"procrustes_align needs at least 3 points, got {a.shape[0]}")

    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    ac = a - mu_a
    bc = b - mu_b

    if np.linalg.matrix_rank(ac) < 2:
        raise ValueError("procrustes_align: source points are coincident or collinear")

    # Cross-covariance maps source directions onto target directions.
    cov = bc.T @ ac
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        sign[2] = -1.0
    rotation = u @ np.diag(sign) @ vt

    if with_scale:
        scale = float(np.sum(d * sign) / np.sum(ac * ac))
    else:
        scale = 1.0
    translation = mu_b - scale * rotation @ mu_a
    residual = mpjpe(scale * a @ rotation.T + translation, b)
    return AlignmentResult(scale=scale, rotation=rotation, translation=translation, residual_mm=residual)


def reconstruction_error(pred: np.ndarray, gt: np.ndarray, with_scale: bool = True) -> float:
    """MPJPE in millimeters after Procrustes alignment of ``pred`` onto ``gt``."""
    return procrustes_align(pred, gt, with_scale=with_scale).residual_mm


def ordinal_accuracy(z_pred: np.ndarray, relations: Sequence[DepthRankRelation]) -> Optional[float]:
    """Fraction of ordered depth pairs whose predicted ordering matches.

    A relation with label r is satisfied when sign(z_pred[q] - z_pred[p]) == r.
    Tied relations (r == 0) carry no ordering and are skipped. Returns None when
    no ordered relations remain; an undefined accuracy is not an accuracy of 0.
    """
    z_pred = np.asarray(z_pred, dtype=np.float64)
    ordered = [rel for rel in relations if rel.r != 0]
    if not ordered:
        return None
    correct = 0
    for rel in ordered:
        p, q = rel.pair
        if np.sign(z_pred[q] - z_pred[p]) == rel.r:
            correct += 1
    return correct / len(ordered)


@dataclass
class SweepGrid:
    """Grid of mean reconstruction errors over stream-voiding probabilities.

    ``cells[i, j]`` is the mean error (mm) with RGB voided at probability
    ``p_rgb_levels[i]`` and depth voided at probability ``p_d_levels[j]``.
    """

    p_rgb_levels: np.ndarray
    p_d_levels: np.ndarray
    cells: np.ndarray

    def validate(self) -> None:
        self.p_rgb_levels = np.asarray(self.p_rgb_levels, dtype=np.float64)
        self.p_d_levels = np.asarray(self.p_d_levels, dtype=np.float64)
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.p_rgb_levels.ndim != 1 or self.p_d_levels.ndim != 1:
            raise ValueError("sweep levels must be 1-D")
        for levels in (self.p_rgb_levels, self.p_d_levels):
            if np.any(levels < 0.0) or np.any(levels > 1.0):
                raise ValueError("sweep levels must lie in [0, 1]")
        expected = (self.p_rgb_levels.size, self.p_d_levels.size)
        if self.cells.shape != expected:
            raise ValueError(f"cells shape {self.cells.shape} does not match levels {expected}")

    def save(self, path) -> None:
        """Write a tab-separated matrix with header rows listing the levels."""
        self.validate()
        lines = []
        lines.append("\t".join(["p_rgb"] + [repr(float(v)) for v in self.p_rgb_levels]))
        lines.append("\t".join(["p_d"] + [repr(float(v)) for v in self.p_d_levels]))
        for row in self.cells:
            lines.append("\t".join(repr(float(v)) for v in row))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SweepGrid":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh if line.strip()]
        if len(lines) < 3:
            raise ValueError(f"{path}: not a sweep grid file")
        head_rgb = lines[0].split("\t")
        head_d = lines[1].split("\t")
        if head_rgb[0] != "p_rgb" or head_d[0] != "p_d":
            raise ValueError(f"{path}: missing level header rows")
        p_rgb = np.array([float(v) for v in head_rgb[1:]])
        p_d = np.array([float(v) for v in head_d[1:]])
        cells = np.array([[float(v) for v in line.split("\t")] for line in lines[2:]])
        grid = cls(p_rgb_levels=p_rgb, p_d_levels=p_d, cells=cells)
        grid.validate()
        return grid


def noise_sweep(
    model,
    test_set: Sequence,
    p_rgb_levels: Sequence[float],
    p_d_levels: Sequence[float],
    rng: np.random.Generator,
) -> SweepGrid:
    """Mean reconstruction error under per-stream voiding probabilities.

    For each grid cell, each test sample has its RGB and depth streams voided
    independently with the cell's probabilities before inference. ``model``
    supplies ``predict_joints(sample, void_rgb, void_depth) -> (14, 3)`` meters
    and ``gt_joints(sample) -> (14, 3)`` meters; when both streams are voided
    the model is expected to run on two void substitutes rather than fail, so
    the high-noise corner of the grid stays defined.

    Cells draw from independent child generators of ``rng``, so evaluating
    cells in parallel or in any order produces identical grids.
    """
    p_rgb_levels = np.asarray(p_rgb_levels, dtype=np.float64)
    p_d_levels = np.asarray(p_d_levels, dtype=np.float64)
    cells = np.zeros((p_rgb_levels.size, p_d_levels.size))
    children = rng.spawn(p_rgb_levels.size * p_d_levels.size)
    for i, p_rgb in enumerate(p_rgb_levels):
        for j, p_d in enumerate(p_d_levels):
            cell_rng = children[i * p_d_levels.size + j]
            errors = []
            for sample in test_set:
                void_rgb = bool(cell_rng.random() < p_rgb)
                void_depth = bool(cell_rng.random() < p_d)
                pred = model.predict_joints(sample, void_rgb=void_rgb, void_depth=void_depth)
                errors.append(reconstruction_error(pred, model.gt_joints(sample)))
            cells[i, j] = float(np.mean(errors))
    grid = SweepGrid(p_rgb_levels=p_rgb_levels, p_d_levels=p_d_levels, cells=cells)
    grid.validate()
    return grid
