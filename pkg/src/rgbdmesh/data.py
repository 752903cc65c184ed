"""Deterministic synthetic dataset generation.

Stands in for real RGB-D mocap corpora: poses and shapes are drawn from a
Gaussian prior, pushed through the synthetic body model and a sampled
weak-perspective camera, then written out as per-stream observations with 2D,
3D and per-keypoint depth annotations. Each sub-dataset carries its own rigid
coordinate frame and unit scale, so consumers must handle the cross-dataset
convention mismatch deliberately.

On-disk format: one JSON object per line, arrays as flat lists under
``{"shape": [...], "data": [...]}``; depth holes serialize as null. A manifest
records every sub-dataset's frame, sizes and noise profile.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .body import BodyModel, N_KEYPOINTS, N_POSE, N_SHAPE, N_JOINTS, smpl_forward
from .camera import CameraParams, camera_depths, project
from .fusion import (
    Stream,
    StreamObservation,
    encode_depth_observation,
    encode_rgb_observation,
    void_observation,
)
from .losses import DepthRankRelation, TIE_TOLERANCE, depth_relations

__all__ = [
    "DatasetFrame",
    "builtin_frames",
    "PosePrior",
    "default_pose_prior",
    "sample_pose_shape",
    "sample_pose_shape_batch",
    "NoiseConfig",
    "sample_camera",
    "Sample",
    "make_sample",
    "build_relations",
    "SubDatasetSpec",
    "DatasetConfig",
    "make_dataset",
    "load_dataset",
    "LoadedSubDataset",
    "write_samples",
    "read_samples",
    "make_paired_set",
]

MANIFEST_FORMAT = "rgbdmesh-dataset-v1"
MANIFEST_NAME = "manifest.json"


# -- coordinate frames -------------------------------------------------------


@dataclass(frozen=True)
class DatasetFrame:
    """A dataset's native 3D convention: rigid transform plus unit scale."""

    name: str
    rotation: np.ndarray
    translation: np.ndarray
    unit_scale: float

    def validate(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"frame {self.name}: rotation must be (3,3) and translation (3,)")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError(f"frame {self.name}: rotation is not special orthogonal")
        if not self.unit_scale > 0:
            raise ValueError(f"frame {self.name}: unit_scale must be positive")

    def to_native(self, points_m: np.ndarray) -> np.ndarray:
        """Common meters -> native units: unit_scale * (R x + t)."""
        x = np.asarray(points_m, dtype=np.float64)
        return self.unit_scale * (x @ np.asarray(self.rotation).T + np.asarray(self.translation))

    def to_common(self, points_native: np.ndarray) -> np.ndarray:
        """Inverse of to_native, back to meters."""
        x = np.asarray(points_native, dtype=np.float64)
        return (x / self.unit_scale - np.asarray(self.translation)) @ np.asarray(self.rotation)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "rotation": [float(v) for v in np.asarray(self.rotation).ravel()],
            "translation": [float(v) for v in np.asarray(self.translation)],
            "unit_scale": float(self.unit_scale),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetFrame":
        frame = cls(
            name=obj["name"],
            rotation=np.array(obj["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(obj["translation"], dtype=np.float64),
            unit_scale=float(obj["unit_scale"]),
        )
        frame.validate()
        return frame


def builtin_frames() -> dict[str, DatasetFrame]:
    """Two conventions differing by a quarter turn, 1.5 m and mm-vs-m units."""
    quarter_turn_y = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    frames = {
        "meters-a": DatasetFrame(
            name="meters-a", rotation=np.eye(3), translation=np.zeros(3), unit_scale=1.0
        ),
        "millimeters-b": DatasetFrame(
            name="millimeters-b",
            rotation=quarter_turn_y,
            translation=np.array([1.5, 0.0, 0.0]),
            unit_scale=1000.0,
        ),
    }
    for frame in frames.values():
        frame.validate()
    return frames


# -- pose and shape prior ----------------------------------------------------


@dataclass
class PosePrior:
    """Zero-mean Gaussian widths: one axis-angle std per joint, one for shape."""

    joint_stds: np.ndarray
    shape_std: float

    def validate(self) -> None:
        stds = np.asarray(self.joint_stds, dtype=np.float64)
        if stds.shape != (N_JOINTS,):
            raise ValueError(f"joint_stds must have shape ({N_JOINTS},), got {stds.shape}")
        if np.any(stds < 0) or self.shape_std < 0:
            raise ValueError("prior deviations must be non-negative")


def default_pose_prior() -> PosePrior:
    # Wider root orientation, moderate limbs, stiff spine and extremities.
    stds = np.full(N_JOINTS, 0.2)
    stds[0] = 0.4
    stds[[3, 6, 9]] = 0.1
    stds[[10, 11, 22, 23]] = 0.1
    return PosePrior(joint_stds=stds, shape_std=1.0)


def sample_pose_shape(rng: np.random.Generator, prior: PosePrior) -> tuple[np.ndarray, np.ndarray]:
    """Draw (beta (10,), theta (72,)); per-joint angles clamped to +-pi."""
    prior.validate()
    beta = rng.normal(0.0, prior.shape_std, size=N_SHAPE)
    stds = np.repeat(np.asarray(prior.joint_stds, dtype=np.float64), 3)
    theta = rng.normal(0.0, 1.0, size=N_POSE) * stds
    return beta, np.clip(theta, -np.pi, np.pi)


def sample_pose_shape_batch(
    rng: np.random.Generator, prior: PosePrior, n: int
) -> tuple[np.ndarray, np.ndarray]:
    betas = np.empty((n, N_SHAPE))
    thetas = np.empty((n, N_POSE))
    for i in range(n):
        betas[i], thetas[i] = sample_pose_shape(rng, prior)
    return betas, thetas


def sample_camera(
    rng: np.random.Generator,
    rot_std: float = 0.2,
    scale_sigma: float = 0.15,
    trans_std: float = 0.1,
) -> CameraParams:
    """Mildly randomized weak-perspective camera; scale is log-normal."""
    rotvec = rng.normal(0.0, rot_std, size=3)
    translation = rng.normal(0.0, trans_std, size=2)
    scale = float(np.exp(rng.normal(0.0, scale_sigma)))
    return CameraParams(global_rotation=rotvec, translation=translation, scale=scale)


# -- sensor noise ------------------------------------------------------------


@dataclass
class NoiseConfig:
    """Observation corruption: pixel noise, depth noise, holes, occlusion.

    ``depth_offset_range`` models the sensor standoff added to every depth
    reading; pairwise orderings are unaffected by it.
    """

    sigma_2d: float = 0.01
    sigma_depth: float = 0.02
    hole_rate: float = 0.05
    occlusion_rate: float = 0.05
    depth_offset_range: tuple[float, float] = (2.0, 4.0)

    def validate(self) -> None:
        if self.sigma_2d < 0 or self.sigma_depth < 0:
            raise ValueError("noise deviations must be non-negative")
        for name in ("hole_rate", "occlusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.depth_offset_range
        if lo > hi:
            raise ValueError("depth_offset_range must be (low, high) with low <= high")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(sigma_2d=0.0, sigma_depth=0.0, hole_rate=0.0, occlusion_rate=0.0, depth_offset_range=(0.0, 0.0))

    def to_json(self) -> dict:
        return {
            "sigma_2d": self.sigma_2d,
            "sigma_depth": self.sigma_depth,
            "hole_rate": self.hole_rate,
            "occlusion_rate": self.occlusion_rate,
            "depth_offset_range": list(self.depth_offset_range),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseConfig":
        cfg = cls(
            sigma_2d=float(obj["sigma_2d"]),
            sigma_depth=float(obj["sigma_depth"]),
            hole_rate=float(obj["hole_rate"]),
            occlusion_rate=float(obj["occlusion_rate"]),
            depth_offset_range=tuple(obj["depth_offset_range"]),
        )
        cfg.validate()
        return cfg


# -- samples -----------------------------------------------------------------


@dataclass
class Sample:
    """One annotated observation pair.

    ``kp3d`` is stored in the dataset's native frame units; ``kp_depths`` are
    camera-frame meters with NaN marking holes. RGB-only samples carry a void
    depth stream and no 3D or depth annotations.
    """

    sample_id: str
    rgb_obs: StreamObservation
    depth_obs: StreamObservation
    kp2d: np.ndarray
    visibility: np.ndarray
    kp3d: Optional[np.ndarray]
    kp_depths: Optional[np.ndarray]
    frame: str
    has_2d: bool = True
    has_3d: bool = True
    has_depth: bool = True

    def validate(self) -> None:
        self.rgb_obs.validate()
        self.depth_obs.validate()
        if np.asarray(self.kp2d).shape != (N_KEYPOINTS, 2):
            raise ValueError(f"kp2d must be ({N_KEYPOINTS}, 2)")
        if np.asarray(self.visibility).shape != (N_KEYPOINTS,):
            raise ValueError(f"visibility must be ({N_KEYPOINTS},)")
        if self.has_depth and not self.depth_obs.present:
            raise ValueError("has_depth requires a present depth stream")
        if self.has_3d and self.kp3d is None:
            raise ValueError("has_3d requires kp3d")
        if self.has_depth and self.kp_depths is None:
            raise ValueError("has_depth requires kp_depths")

    def to_record(self) -> dict:
        def arr(a):
            a = np.asarray(a, dtype=np.float64)
            return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}

        depths = None
        if self.kp_depths is not None:
            flat = [None if not np.isfinite(v) else float(v) for v in np.asarray(self.kp_depths)]
            depths = {"shape": [N_KEYPOINTS], "data": flat}
        return {
            "sample_id": self.sample_id,
            "frame": self.frame,
            "has_2d": self.has_2d,
            "has_3d": self.has_3d,
            "has_depth": self.has_depth,
            "kp2d": arr(self.kp2d),
            "visibility": {"shape": [N_KEYPOINTS], "data": [int(v) for v in np.asarray(self.visibility, dtype=bool)]},
            "kp3d": None if self.kp3d is None else arr(self.kp3d),
            "kp_depths": depths,
            "rgb_obs": {"stream": "rgb", "present": self.rgb_obs.present, "data": arr(self.rgb_obs.data)},
            "depth_obs": {"stream": "depth", "present": self.depth_obs.present, "data": arr(self.depth_obs.data)},
        }

    @classmethod
    def from_record(cls, record: dict) -> "Sample":
        def arr(obj):
            return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])

        depths = None
        if record["kp_depths"] is not None:
            depths = np.array(
                [np.nan if v is None else v for v in record["kp_depths"]["data"]], dtype=np.float64
            )
        sample = cls(
            sample_id=record["sample_id"],
            rgb_obs=StreamObservation(Stream.RGB, arr(record["rgb_obs"]["data"]), record["rgb_obs"]["present"]),
            depth_obs=StreamObservation(Stream.DEPTH, arr(record["depth_obs"]["data"]), record["depth_obs"]["present"]),
            kp2d=arr(record["kp2d"]),
            visibility=np.array(record["visibility"]["data"], dtype=bool),
            kp3d=None if record["kp3d"] is None else arr(record["kp3d"]),
            kp_depths=depths,
            frame=record["frame"],
            has_2d=record["has_2d"],
            has_3d=record["has_3d"],
            has_depth=record["has_depth"],
        )
        sample.validate()
        return sample


def make_sample(
    model: BodyModel,
    beta: np.ndarray,
    theta: np.ndarray,
    cam: CameraParams,
    frame: DatasetFrame,
    noise: NoiseConfig,
    rng: np.random.Generator,
    sample_id: str = "",
    with_3d: bool = True,
    with_depth: bool = True,
) -> Sample:
    """Render one body through the camera and sensor model into a Sample.

    The draw order (2D noise, occlusion, depth offset, depth noise, holes) is
    fixed so a given rng stream always produces the same sample.
    """
    noise.validate()
    frame.validate()
    _, joints = smpl_forward(model, np.asarray(beta, dtype=np.float64), np.asarray(theta, dtype=np.float64))

    kp2d = project(joints, cam) + rng.normal(0.0, noise.sigma_2d, size=(N_KEYPOINTS, 2))
    visibility = rng.random(N_KEYPOINTS) >= noise.occlusion_rate
    if not np.any(visibility):
        visibility[int(rng.integers(N_KEYPOINTS))] = True

    kp3d = frame.to_native(joints) if with_3d else None

    kp_depths = None
    depth_obs = void_observation(Stream.DEPTH)
    if with_depth:
        lo, hi = noise.depth_offset_range
        offset = rng.uniform(lo, hi) if hi > lo else float(lo)
        kp_depths = camera_depths(joints, cam) + offset + rng.normal(0.0, noise.sigma_depth, size=N_KEYPOINTS)
        holes = rng.random(N_KEYPOINTS) < noise.hole_rate
        kp_depths[holes] = np.nan
        depth_obs = encode_depth_observation(kp2d, visibility, kp_depths)

    sample = Sample(
        sample_id=sample_id,
        rgb_obs=encode_rgb_observation(kp2d, visibility),
        depth_obs=depth_obs,
        kp2d=kp2d,
        visibility=visibility,
        kp3d=kp3d,
        kp_depths=kp_depths,
        frame=frame.name,
        has_2d=True,
        has_3d=with_3d,
        has_depth=with_depth,
    )
    sample.validate()
    return sample


def build_relations(sample: Sample, tie_tolerance: float = TIE_TOLERANCE) -> list[DepthRankRelation]:
    """Pairwise depth orderings among the sample's hole-free readings."""
    if not sample.has_depth or sample.kp_depths is None:
        raise ValueError(f"sample {sample.sample_id} carries no depth readings")
    return depth_relations(sample.kp_depths, tie_tolerance=tie_tolerance)


# -- datasets ----------------------------------------------------------------


@dataclass
class SubDatasetSpec:
    """One synthetic sub-dataset: a frame, a size and an annotation profile."""

    name: str
    frame: str
    size: int
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    has_3d: bool = True
    has_depth: bool = True
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.size < 1:
            raise ValueError(f"sub-dataset {self.name}: size must be positive")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"sub-dataset {self.name}: test_fraction must lie in [0, 1)")
        self.noise.validate()


@dataclass
class DatasetConfig:
    out_dir: Path
    sub_datasets: list[SubDatasetSpec]
    prior: PosePrior = field(default_factory=default_pose_prior)
    frames: dict[str, DatasetFrame] = field(default_factory=builtin_frames)
    body_seed: int = 0

    def validate(self) -> None:
        if not self.sub_datasets:
            raise ValueError("dataset config needs at least one sub-dataset")
        names = [spec.name for spec in self.sub_datasets]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate sub-dataset names: {names}")
        for spec in self.sub_datasets:
            spec.validate()
            if spec.frame not in self.frames:
                raise ValueError(f"sub-dataset {spec.name}: unknown frame {spec.frame!r}")
        self.prior.validate()


def write_samples(path, samples: Sequence[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_record(), sort_keys=True, separators=(",", ":"), allow_nan=False))
            fh.write("\n")


def read_samples(path) -> list[Sample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                samples.append(Sample.from_record(json.loads(line)))
    return samples


def make_dataset(config: DatasetConfig, rng: np.random.Generator, model: Optional[BodyModel] = None) -> Path:
    """Generate every sub-dataset and write train/test splits plus a manifest.

    Each sample draws from its own child generator spawned off ``rng`` in a
    fixed order, so generation is reproducible and could be parallelized over
    samples without changing a byte of output. Returns the manifest path.
    """
    from .body import synth_model

    config.validate()
    if model is None:
        model = synth_model(seed=config.body_seed)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest: dict = {"format": MANIFEST_FORMAT, "body_seed": config.body_seed, "sub_datasets": []}
    for spec in config.sub_datasets:
        frame = config.frames[spec.frame]
        children = rng.spawn(spec.size)
        samples = []
        for i in range(spec.size):
            child = children[i]
            beta, theta = sample_pose_shape(child, config.prior)
            cam = sample_camera(child)
            samples.append(
                make_sample(
                    model,
                    beta,
                    theta,
                    cam,
                    frame,
                    spec.noise,
                    child,
                    sample_id=f"{spec.name}/{i:06d}",
                    with_3d=spec.has_3d,
                    with_depth=spec.has_depth,
                )
            )
        n_test = int(round(spec.size * spec.test_fraction))
        n_train = spec.size - n_test
        train_path = out_dir / f"{spec.name}.train.jsonl"
        test_path = out_dir / f"{spec.name}.test.jsonl"
        write_samples(train_path, samples[:n_train])
        write_samples(test_path, samples[n_train:])
        manifest["sub_datasets"].append(
            {
                "name": spec.name,
                "frame": frame.to_json(),
                "size": spec.size,
                "n_train": n_train,
                "n_test": n_test,
                "has_3d": spec.has_3d,
                "has_depth": spec.has_depth,
                "noise": spec.noise.to_json(),
                "train_path": train_path.name,
                "test_path": test_path.name,
            }
        )

    manifest_path = out_dir / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest_path


@dataclass
class LoadedSubDataset:
    name: str
    frame: DatasetFrame
    has_3d: bool
    has_depth: bool
    train: list[Sample]
    test: list[Sample]


def load_dataset(manifest_path) -> list[LoadedSubDataset]:
    """Read a manifest and every referenced sample file back into memory."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{manifest_path} is not a dataset manifest")
    out = []
    for entry in manifest["sub_datasets"]:
        out.append(
            LoadedSubDataset(
                name=entry["name"],
                frame=DatasetFrame.from_json(entry["frame"]),
                has_3d=entry["has_3d"],
                has_depth=entry["has_depth"],
                train=read_samples(manifest_path.parent / entry["train_path"]),
                test=read_samples(manifest_path.parent / entry["test_path"]),
            )
        )
    return out


# -- paired parameter data ---------------------------------------------------


def make_paired_set(
    model: BodyModel, prior: PosePrior, n: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """Paired (3D keypoints, body parameters) draws for constraint training.

    Joints are body-frame meters; real corpora would supply such pairs from
    mocap fits, here the prior plays that role.
    """
    betas, thetas = sample_pose_shape_batch(rng, prior, n)
    joints = np.empty((n, N_KEYPOINTS, 3))
    for i in range(n):
        _, joints[i] = smpl_forward(model, betas[i], thetas[i])
    return {"joints14": joints, "beta": betas, "theta": thetas}
