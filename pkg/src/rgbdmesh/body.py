"""Synthetic articulated body model.

A stand-in for a licensed statistical body model with the same moving parts:
a 24-joint SMPL-style kinematic tree, a vertex template with linear shape
blendshapes, linear blend skinning, and a sparse linear regressor mapping
vertices to the 14 evaluation keypoints (LSP convention). Model geometry is
generated deterministically from a seed; nothing is learned from data.

Pose-dependent corrective blendshapes are deliberately omitted: plain LBS
over the same parameterization exercises every quantity the rest of the
pipeline consumes.

All lengths are meters. Rest pose is a T-pose, pelvis at the origin, y up,
x toward the body's left.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint

# SMPL rig topology: parents[j] < j, root sentinel -1.
PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21],
    dtype=np.intp,
)

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hand", "r_hand",
]

# The 14 evaluation keypoints (LSP order) and the rig joints they shadow.
KEYPOINT_NAMES = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
    "neck", "head",
]
KEYPOINT_JOINTS = np.array([8, 5, 2, 1, 4, 7, 21, 19, 17, 16, 18, 20, 12, 15], dtype=np.intp)

# Skeleton edges in keypoint index space; used for scale normalization.
KEYPOINT_EDGES = np.array(
    [
        (0, 1), (1, 2),          # right leg
        (5, 4), (4, 3),          # left leg
        (2, 3),                  # pelvis
        (6, 7), (7, 8),          # right arm
        (11, 10), (10, 9),       # left arm
        (8, 12), (9, 12),        # shoulders to neck
        (12, 13),                # head
        (2, 12), (3, 12),        # trunk
    ],
    dtype=np.intp,
)

N_SHAPE = 10
N_POSE = 72
N_JOINTS = 24
N_KEYPOINTS = 14

# Rest-pose joint scaffold guiding synthetic geometry (meters).
_REST_SCAFFOLD = np.array(
    [
        (0.00, 0.00, 0.00),    # pelvis
        (0.09, -0.06, 0.00),   # l_hip
        (-0.09, -0.06, 0.00),  # r_hip
        (0.00, 0.11, 0.00),    # spine1
        (0.10, -0.45, 0.00),   # l_knee
        (-0.10, -0.45, 0.00),  # r_knee
        (0.00, 0.24, 0.00),    # spine2
        (0.11, -0.85, 0.00),   # l_ankle
        (-0.11, -0.85, 0.00),  # r_ankle
        (0.00, 0.35, 0.00),    # spine3
        (0.12, -0.93, 0.12),   # l_foot
        (-0.12, -0.93, 0.12),  # r_foot
        (0.00, 0.50, 0.00),    # neck
        (0.07, 0.45, 0.00),    # l_collar
        (-0.07, 0.45, 0.00),   # r_collar
        (0.00, 0.65, 0.00),    # head
        (0.17, 0.47, 0.00),    # l_shoulder
        (-0.17, 0.47, 0.00),   # r_shoulder
        (0.45, 0.47, 0.00),    # l_elbow
        (-0.45, 0.47, 0.00),   # r_elbow
        (0.71, 0.47, 0.00),    # l_wrist
        (-0.71, 0.47, 0.00),   # r_wrist
        (0.79, 0.47, 0.00),    # l_hand
        (-0.79, 0.47, 0.00),   # r_hand
    ]
)


@dataclass
class BodyModel:
    """Immutable model parameters; forward passes are pure functions."""

    template_vertices: np.ndarray  # (N,3)
    shape_dirs: np.ndarray  # (N,3,10)
    skinning_weights: np.ndarray  # (N,24)
    joint_regressor_rest: np.ndarray  # (24,N)
    keypoint_regressor: np.ndarray  # (14,N)
    parents: np.ndarray  # (24,)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    def validate(self) -> None:
        n = self.n_vertices
        if n < N_JOINTS:
            raise ValueError(f"model needs at least {N_JOINTS} vertices, got {n}")
        if self.shape_dirs.shape != (n, 3, N_SHAPE):
            raise ValueError(f"shape_dirs has shape {self.shape_dirs.shape}")
        if self.skinning_weights.shape != (n, N_JOINTS):
            raise ValueError(f"skinning_weights has shape {self.skinning_weights.shape}")
        if np.any(self.skinning_weights < 0):
            raise ValueError("skinning weights must be non-negative")
        sums = self.skinning_weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("skinning weight rows must sum to 1")
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, N_JOINTS)):
            raise ValueError("parents must define a tree with parents[j] < j")

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path,
            {
                "template_vertices": self.template_vertices,
                "shape_dirs": self.shape_dirs,
                "skinning_weights": self.skinning_weights,
                "joint_regressor_rest": self.joint_regressor_rest,
                "keypoint_regressor": self.keypoint_regressor,
                "parents": self.parents.astype(np.float64),
            },
            meta={"kind": "body_model"},
        )

    @classmethod
    def load(cls, path: str | Path) -> "BodyModel":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "body_model":
            raise ValueError(f"{path} is not a body model checkpoint")
        model = cls(
            template_vertices=arrays["template_vertices"],
            shape_dirs=arrays["shape_dirs"],
            skinning_weights=arrays["skinning_weights"],
            joint_regressor_rest=arrays["joint_regressor_rest"],
            keypoint_regressor=arrays["keypoint_regressor"],
            parents=arrays["parents"].astype(np.intp),
        )
        model.validate()
        return model


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point (M,3) to the segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def synth_model(seed: int = 0, n_vertices: int = 200) -> BodyModel:
    """Deterministically generate a plausible body model.

    Vertices are scattered along bones of a fixed human-proportioned
    scaffold; skinning weights come from inverse distance to the two nearest
    bones (each bone owned by its proximal joint); joint and keypoint
    regressors from inverse distance to the few nearest vertices.
    """
    if n_vertices < N_JOINTS:
        raise ValueError(f"n_vertices must be at least {N_JOINTS}, got {n_vertices}")
    rng = np.random.default_rng(seed)
    bones = [(int(PARENTS[j]), j) for j in range(1, N_JOINTS)]

    verts = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        par, j = bones[i % len(bones)]
        t = rng.uniform(0.1, 0.9)
        base = (1.0 - t) * _REST_SCAFFOLD[par] + t * _REST_SCAFFOLD[j]
        verts[i] = base + rng.normal(0.0, 0.03, size=3)

    # Joint j controls the bones from it to each of its children; leaves
    # control a point. Distance to that control region drives skinning.
    children: list[list[int]] = [[] for _ in range(N_JOINTS)]
    for j in range(1, N_JOINTS):
        children[int(PARENTS[j])].append(j)
    dists = np.empty((n_vertices, N_JOINTS))
    for j in range(N_JOINTS):
        if children[j]:
            dists[:, j] = np.min(
                [_point_segment_distance(verts, _REST_SCAFFOLD[j], _REST_SCAFFOLD[c]) for c in children[j]],
                axis=0,
            )
        else:
            dists[:, j] = np.linalg.norm(verts - _REST_SCAFFOLD[j], axis=1)

    weights = np.zeros((n_vertices, N_JOINTS))
    nearest2 = np.argsort(dists, axis=1)[:, :2]
    for i in range(n_vertices):
        for j in nearest2[i]:
            weights[i, j] += 1.0 / (dists[i, j] + 0.02)
    weights /= weights.sum(axis=1, keepdims=True)

    # Inverse-distance regressors over the nearest vertices to each joint.
    k = min(6, n_vertices)
    jreg = np.zeros((N_JOINTS, n_vertices))
    vdist = np.linalg.norm(verts[None, :, :] - _REST_SCAFFOLD[:, None, :], axis=2)
    for j in range(N_JOINTS):
        idx = np.argsort(vdist[j])[:k]
        w = 1.0 / (vdist[j, idx] + 0.01)
        jreg[j, idx] = w / w.sum()

    shape_dirs = rng.normal(0.0, 0.01, size=(n_vertices, 3, N_SHAPE))

    model = BodyModel(
        template_vertices=verts,
        shape_dirs=shape_dirs,
        skinning_weights=weights,
        joint_regressor_rest=jreg,
        keypoint_regressor=jreg[KEYPOINT_JOINTS].copy(),
        parents=PARENTS.copy(),
    )
    model.validate()
    return model


# -- rotations -------------------------------------------------------------


def rotation_matrices(omega):
    """Axis-angle rows -> rotation matrices, (J,3) -> (J,3,3).

    Accepts an ndarray (returns an ndarray) or a Value (returns a Value wired
    into the autodiff graph through the kernel backward).
    """
    if isinstance(omega, ad.Value):
        om = omega.data
        R = kernels.rodrigues_batch(om)
        return ad.custom(
            "rodrigues",
            R,
            (omega,),
            lambda g: (kernels.rodrigues_batch_backward(om, g),),
        )
    return kernels.rodrigues_batch(np.asarray(omega, dtype=np.float64))


def rodrigues(axis_angle):
    """Single axis-angle triple -> 3x3 rotation matrix (ndarray or Value)."""
    if isinstance(axis_angle, ad.Value):
        return rotation_matrices(axis_angle.reshape((1, 3))).reshape((3, 3))
    return kernels.rodrigues_batch(np.asarray(axis_angle, dtype=np.float64).reshape(1, 3))[0]


# -- forward model ---------------------------------------------------------


def shaped_rest(model: BodyModel, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply shape blendshapes -> (vertices_rest (N,3), joints_rest (24,3))."""
    beta = np.asarray(beta, dtype=np.float64)
    vertices_rest = model.template_vertices + model.shape_dirs @ beta
    joints_rest = model.joint_regressor_rest @ vertices_rest
    return vertices_rest, joints_rest


def forward_kinematics(
    joints_rest: np.ndarray, theta: np.ndarray, parents: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """World transforms of every joint: (rotations (24,3,3), positions (24,3)).

    Root transform is (rodrigues(theta[0:3]), joints_rest[0]); each child
    composes its parent's rotation with its local one about its rest offset.
    """
    theta = np.asarray(theta, dtype=np.float64)
    R = kernels.rodrigues_batch(theta.reshape(-1, 3))
    nj = parents.shape[0]
    W = np.empty((nj, 3, 3))
    p = np.empty((nj, 3))
    W[0] = R[0]
    p[0] = joints_rest[0]
    for j in range(1, nj):
        par = parents[j]
        W[j] = W[par] @ R[j]
        p[j] = W[par] @ (joints_rest[j] - joints_rest[par]) + p[par]
    return W, p


def _model_args(model: BodyModel):
    return (
        model.template_vertices,
        model.shape_dirs,
        model.joint_regressor_rest,
        model.keypoint_regressor,
        model.skinning_weights,
        model.parents,
    )


def smpl_forward(model: BodyModel, beta, theta):
    """Pose and shape the mesh -> (vertices (N,3), joints3d (14,3)).

    ndarray inputs give ndarray outputs; Value inputs give Values
    differentiable with respect to both beta and theta.
    """
    if isinstance(beta, ad.Value) or isinstance(theta, ad.Value):
        beta_v = beta if isinstance(beta, ad.Value) else ad.constant(beta)
        theta_v = theta if isinstance(theta, ad.Value) else ad.constant(theta)
        args = _model_args(model)
        verts, joints14, cache = kernels.body_forward(*args, beta_v.data, theta_v.data)
        parents = (beta_v, theta_v)
        verts_v = ad.custom(
            "body_vertices",
            verts,
            parents,
            lambda g: kernels.body_backward(*args, cache, g, None),
        )
        joints_v = ad.custom(
            "body_joints",
            joints14,
            parents,
            lambda g: kernels.body_backward(*args, cache, None, g),
        )
        return verts_v, joints_v
    beta = np.asarray(beta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    verts, joints14, _ = kernels.body_forward(*_model_args(model), beta, theta)
    return verts, joints14


def smpl_joints_batch(model: BodyModel, beta: ad.Value, theta: ad.Value) -> ad.Value:
    """Batched differentiable keypoints: (B,10) x (B,72) -> (B,14,3).

    One fused graph node per batch; the kernel runs per sample.
    """
    if beta.data.ndim != 2 or theta.data.ndim != 2 or beta.shape[0] != theta.shape[0]:
        raise ad.ShapeError("body_joints_batch", beta.shape, theta.shape)
    args = _model_args(model)
    nb = beta.shape[0]
    outs = np.empty((nb, N_KEYPOINTS, 3))
    caches = []
    for b in range(nb):
        _, joints14, cache = kernels.body_forward(*args, beta.data[b], theta.data[b])
        outs[b] = joints14
        caches.append(cache)

    def backward_fn(g):
        dbeta = np.empty((nb, N_SHAPE))
        dtheta = np.empty((nb, N_POSE))
        for b in range(nb):
            dbeta[b], dtheta[b] = kernels.body_backward(*args, caches[b], None, g[b])
        return dbeta, dtheta

    return ad.custom("body_joints_batch", outs, (beta, theta), backward_fn)
