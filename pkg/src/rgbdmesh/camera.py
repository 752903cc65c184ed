"""Weak-perspective camera: x = s * pi(R X) + t.

pi drops the camera-frame z coordinate (orthographic). Image coordinates are
x right, y down, origin at the crop center, crop normalized to [-1, 1]. The
same rotation's z output is the camera-frame depth consumed by the ranking
loss; only pairwise depth differences are ever used, so no depth offset is
modeled.

Every operation accepts ndarrays (returning ndarrays) or autodiff Values
(returning Values differentiable in all inputs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import body


@dataclass
class CameraParams:
    global_rotation: object  # (3,) axis-angle
    translation: object  # (2,)
    scale: object  # positive scalar

    def validate(self) -> None:
        rot = _raw(self.global_rotation)
        t = _raw(self.translation)
        s = _raw(self.scale)
        if np.asarray(rot).shape != (3,) or np.asarray(t).shape != (2,):
            raise ValueError("camera expects rotation (3,) and translation (2,)")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
            raise ValueError("camera parameters must be finite")
        if not np.all(np.asarray(s) > 0):
            raise ValueError("camera scale must be positive")


def _raw(x):
    return x.data if isinstance(x, ad.Value) else np.asarray(x, dtype=np.float64)


def _is_value(*xs) -> bool:
    return any(isinstance(x, ad.Value) for x in xs)


def _rotate(joints3d, rotation):
    """R X per joint; rows transform as X @ R^T."""
    if _is_value(joints3d, rotation):
        j = joints3d if isinstance(joints3d, ad.Value) else ad.constant(joints3d)
        w = rotation if isinstance(rotation, ad.Value) else ad.constant(rotation)
        R = body.rodrigues(w)
        return ad.matmul(j, R.transpose_last2())
    R = body.rodrigues(rotation)
    return np.asarray(joints3d, dtype=np.float64) @ R.T


def project(joints3d, cam: CameraParams):
    """Joints (14,3) -> image keypoints (14,2)."""
    cam.validate()
    rotated = _rotate(joints3d, cam.global_rotation)
    if isinstance(rotated, ad.Value):
        xy = rotated.narrow(1, 0, 2)
        s = cam.scale if isinstance(cam.scale, ad.Value) else ad.constant(cam.scale)
        t = cam.translation if isinstance(cam.translation, ad.Value) else ad.constant(cam.translation)
        ones = ad.constant(np.ones((xy.shape[0], 1)))
        return xy * s.reshape((1,)) + ad.matmul(ones, t.reshape((1, 2)))
    s = float(_raw(cam.scale))
    return rotated[:, :2] * s + _raw(cam.translation)


def camera_depths(joints3d, cam: CameraParams):
    """Camera-frame depth per joint: the z of R X, shape (14,)."""
    cam.validate()
    rotated = _rotate(joints3d, cam.global_rotation)
    if isinstance(rotated, ad.Value):
        return rotated.narrow(1, 2, 3).reshape((rotated.shape[0],))
    return rotated[:, 2]


# -- batched graph helpers (training path) ---------------------------------


def project_batch(joints: ad.Value, R: ad.Value, scale: ad.Value, trans: ad.Value) -> ad.Value:
    """(B,14,3) x (B,3,3) x (B,) x (B,2) -> (B,14,2)."""
    rotated = ad.matmul(joints, R.transpose_last2())
    nb, nk = rotated.shape[0], rotated.shape[1]
    xy = rotated.narrow(2, 0, 2)
    scaled = ad.batch_scale(xy, scale)
    ones = ad.constant(np.ones((nb, nk, 1)))
    return scaled + ad.matmul(ones, trans.reshape((nb, 1, 2)))


def depths_batch(joints: ad.Value, R: ad.Value) -> ad.Value:
    """(B,14,3) x (B,3,3) -> camera-frame depths (B,14)."""
    rotated = ad.matmul(joints, R.transpose_last2())
    nb, nk = rotated.shape[0], rotated.shape[1]
    return rotated.narrow(2, 2, 3).reshape((nb, nk))
