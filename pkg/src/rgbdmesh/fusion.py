"""Two-stream fusion and iterative body-parameter regression.

The RGB and depth streams are fixed-length observation vectors (keypoint-level
stand-ins for image features), each run through its own feedforward encoder.
Features are concatenated, fused by two rectified layers, and an iterative
regressor refines an 88-dim parameter vector Theta from its mean initialization:

    Theta = [pose (72) | shape (10) | cam rotation (3) | cam translation (2) | cam scale (1)]

During training one stream per sample may be replaced by an all-zeros void
substitute so the network learns to survive a missing modality. The same void
substitution serves missing streams at inference.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import camera, checkpoint, nn
from .body import BodyModel, N_KEYPOINTS, rotation_matrices, smpl_forward, smpl_joints_batch
from .losses import (
    LossWeights,
    depth_relations,
    discriminator_forward,
    init_discriminator,
    loss_2d,
    loss_adv,
    loss_drc,
    loss_smpl,
    loss_total,
)
from .metrics import ordinal_accuracy, reconstruction_error

__all__ = [
    "Stream",
    "StreamObservation",
    "StreamMask",
    "DropChoice",
    "FusionConfig",
    "FusionNetwork",
    "FusionModel",
    "FusionTrainer",
    "TrainSettings",
    "RGB_OBS_DIM",
    "DEPTH_OBS_DIM",
    "THETA_DIM",
    "encode_rgb_observation",
    "encode_depth_observation",
    "void_observation",
    "select_streams",
    "encode",
    "fuse",
    "regress",
    "infer",
    "mean_theta",
    "split_theta",
    "evaluate_model",
]


class Stream(enum.Enum):
    RGB = "rgb"
    DEPTH = "depth"


# Observation layouts. RGB: flattened 2D keypoints plus visibility flags.
# Depth: the same 2D layout plus mean-centered metric depths and a valid mask,
# preserving the asymmetry that only this stream carries z information.
RGB_OBS_DIM = 2 * N_KEYPOINTS + N_KEYPOINTS
DEPTH_OBS_DIM = 2 * N_KEYPOINTS + N_KEYPOINTS + N_KEYPOINTS

_OBS_DIMS = {Stream.RGB: RGB_OBS_DIM, Stream.DEPTH: DEPTH_OBS_DIM}

THETA_DIM = 88
_SL_POSE = slice(0, 72)
_SL_SHAPE = slice(72, 82)
_SL_CAM_ROT = slice(82, 85)
_SL_CAM_T = slice(85, 87)
_IDX_CAM_SCALE = 87


@dataclass
class StreamObservation:
    """One stream's input vector; absent streams carry all zeros."""

    stream: Stream
    data: np.ndarray
    present: bool

    def validate(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        expected = _OBS_DIMS[self.stream]
        if self.data.shape != (expected,):
            raise ValueError(f"{self.stream.value} observation expects shape ({expected},), got {self.data.shape}")
        if not self.present and np.any(self.data != 0.0):
            raise ValueError("absent stream observations must be all zeros")


def void_observation(stream: Stream) -> StreamObservation:
    return StreamObservation(stream=stream, data=np.zeros(_OBS_DIMS[stream]), present=False)


def encode_rgb_observation(kp2d: np.ndarray, visibility: np.ndarray) -> StreamObservation:
    """Pack noisy normalized keypoints and visibility into the RGB vector."""
    kp2d = np.asarray(kp2d, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    masked = np.where(vis[:, None], kp2d, 0.0)
    data = np.concatenate([masked.ravel(), vis.astype(np.float64)])
    return StreamObservation(stream=Stream.RGB, data=data, present=True)


def encode_depth_observation(
    kp2d: np.ndarray,
    visibility: np.ndarray,
    depths: np.ndarray,
    valid: Optional[np.ndarray] = None,
) -> StreamObservation:
    """Pack keypoints plus mean-centered per-keypoint depths and a valid mask.

    Hole readings (NaN or masked out) contribute zeros; centering on the valid
    mean keeps the vector well-scaled regardless of the sensor standoff.
    """
    kp2d = np.asarray(kp2d, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    depths = np.asarray(depths, dtype=np.float64)
    ok = np.isfinite(depths)
    if valid is not None:
        ok = ok & np.asarray(valid, dtype=bool)
    centered = np.zeros(N_KEYPOINTS)
    if np.any(ok):
        centered[ok] = depths[ok] - depths[ok].mean()
    masked = np.where(vis[:, None], kp2d, 0.0)
    data = np.concatenate([masked.ravel(), centered, ok.astype(np.float64)])
    return StreamObservation(stream=Stream.DEPTH, data=data, present=True)


# -- training-time stream dropout ------------------------------------------


class DropChoice(enum.Enum):
    NONE = "none"
    RGB = "rgb"
    DEPTH = "depth"


@dataclass(frozen=True)
class StreamMask:
    drop: DropChoice


def select_streams(rng: np.random.Generator, p_miss: float) -> StreamMask:
    """Three-way pick: drop RGB or depth each with p_miss, neither otherwise.

    p_miss must stay below 0.5 so the neither-dropped case keeps positive
    probability and both streams are never dropped together.
    """
    if not 0.0 <= p_miss < 0.5:
        raise ValueError(f"p_miss must lie in [0, 0.5), got {p_miss}")
    u = rng.random()
    if u < p_miss:
        return StreamMask(drop=DropChoice.RGB)
    if u < 2.0 * p_miss:
        return StreamMask(drop=DropChoice.DEPTH)
    return StreamMask(drop=DropChoice.NONE)


# -- network ----------------------------------------------------------------

_ENC_LAYERS = 3
_FUSE_LAYERS = 2
_REG_LAYERS = 3


@dataclass
class FusionConfig:
    """Desk-scale dims; the full-scale counterpart uses d = 2048 features."""

    feature_dim: int = 128
    fusion_widths: Optional[tuple[int, int]] = None  # default (2d, d)
    regressor_hidden: tuple[int, int] = (128, 128)
    n_iterations: int = 3

    def resolved_fusion_widths(self) -> tuple[int, int]:
        if self.fusion_widths is not None:
            return tuple(self.fusion_widths)
        return (2 * self.feature_dim, self.feature_dim)

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be at least 1")


def mean_theta() -> np.ndarray:
    """Initial Theta: rest pose, mean shape, identity camera at unit scale."""
    theta = np.zeros(THETA_DIM)
    theta[_IDX_CAM_SCALE] = 1.0
    return theta


def split_theta(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    """(88,) -> (pose 72, shape 10, cam rotation 3, cam translation 2, cam scale)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (THETA_DIM,):
        raise ValueError(f"expected theta shape ({THETA_DIM},), got {theta.shape}")
    return (
        theta[_SL_POSE],
        theta[_SL_SHAPE],
        theta[_SL_CAM_ROT],
        theta[_SL_CAM_T],
        float(theta[_IDX_CAM_SCALE]),
    )


class FusionNetwork:
    """Parameter container for the encoders, fusion stack and regressor."""

    def __init__(self, params: dict[str, np.ndarray], config: FusionConfig):
        config.validate()
        self.params = params
        self.config = config

    @classmethod
    def init(cls, seed: int, config: Optional[FusionConfig] = None) -> "FusionNetwork":
        config = config or FusionConfig()
        config.validate()
        rng = np.random.default_rng(seed)
        d = config.feature_dim
        w1, w2 = config.resolved_fusion_widths()
        params: dict[str, np.ndarray] = {}
        params.update(nn.init_mlp(rng, [RGB_OBS_DIM, d, d, d], "enc_rgb"))
        params.update(nn.init_mlp(rng, [DEPTH_OBS_DIM, d, d, d], "enc_d"))
        params.update(nn.init_mlp(rng, [2 * d, w1, w2], "fuse"))
        h1, h2 = config.regressor_hidden
        params.update(nn.init_mlp(rng, [w2 + THETA_DIM, h1, h2, THETA_DIM], "reg"))
        return cls(params, config)

    def save(self, path) -> None:
        meta = {
            "kind": "fusion_network",
            "feature_dim": self.config.feature_dim,
            "fusion_widths": list(self.config.resolved_fusion_widths()),
            "regressor_hidden": list(self.config.regressor_hidden),
            "n_iterations": self.config.n_iterations,
        }
        checkpoint.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "FusionNetwork":
        arrays, meta = checkpoint.load_checkpoint(path)
        if meta.get("kind") != "fusion_network":
            raise ValueError(f"{path} is not a fusion network checkpoint")
        config = FusionConfig(
            feature_dim=int(meta["feature_dim"]),
            fusion_widths=tuple(meta["fusion_widths"]),
            regressor_hidden=tuple(meta["regressor_hidden"]),
            n_iterations=int(meta["n_iterations"]),
        )
        # Trainer checkpoints also carry discriminator arrays; keep only ours.
        own = {k: v for k, v in arrays.items() if k.split(".")[0] in ("enc_rgb", "enc_d", "fuse", "reg")}
        return cls(own, config)


# -- single-sample forward (plain arrays, no graph) -------------------------


def encode(obs: StreamObservation, net: FusionNetwork) -> np.ndarray:
    """One stream observation -> d-dim feature. Void input gives the encoder's
    fixed void feature (its response to all zeros)."""
    obs.validate()
    prefix = "enc_rgb" if obs.stream is Stream.RGB else "enc_d"
    return nn.mlp_forward_np(net.params, prefix, _ENC_LAYERS, obs.data[None, :])[0]


def fuse(f_rgb: np.ndarray, f_d: np.ndarray, net: FusionNetwork) -> np.ndarray:
    """Concatenate [RGB | DEPTH] features and apply the two fusion layers."""
    f_rgb = np.asarray(f_rgb, dtype=np.float64)
    f_d = np.asarray(f_d, dtype=np.float64)
    d = net.config.feature_dim
    if f_rgb.shape != (d,) or f_d.shape != (d,):
        raise ValueError(f"fuse expects two ({d},) features, got {f_rgb.shape} and {f_d.shape}")
    x = np.concatenate([f_rgb, f_d])[None, :]
    return nn.mlp_forward_np(net.params, "fuse", _FUSE_LAYERS, x, final_relu=True)[0]


def regress(phi_fuse: np.ndarray, net: FusionNetwork, n_iterations: Optional[int] = None) -> np.ndarray:
    """Iteratively refine Theta from its mean by feeding [phi_fuse | Theta]."""
    n = net.config.n_iterations if n_iterations is None else n_iterations
    if n < 1:
        raise ValueError("n_iterations must be at least 1")
    phi = np.asarray(phi_fuse, dtype=np.float64)
    theta = mean_theta()
    for _ in range(n):
        x = np.concatenate([phi, theta])[None, :]
        theta = theta + nn.mlp_forward_np(net.params, "reg", _REG_LAYERS, x)[0]
    return theta


def infer(sample, net: FusionNetwork, use_rgb: bool = True, use_depth: bool = True) -> np.ndarray:
    """Run the full stack on one sample, voiding unavailable streams.

    A stream counts as available only when requested and present on the
    sample. With neither stream available the prediction would be input-free,
    so this raises instead; see FusionModel.predict_joints for the noise-sweep
    path that deliberately runs on two void substitutes.
    """
    rgb_ok = use_rgb and sample.rgb_obs.present
    depth_ok = use_depth and sample.depth_obs.present
    if not rgb_ok and not depth_ok:
        raise ValueError("infer needs at least one present stream")
    rgb = sample.rgb_obs if rgb_ok else void_observation(Stream.RGB)
    depth = sample.depth_obs if depth_ok else void_observation(Stream.DEPTH)
    return regress(fuse(encode(rgb, net), encode(depth, net), net), net)


def _forward_np(net: FusionNetwork, rgb_data: Optional[np.ndarray], depth_data: Optional[np.ndarray]) -> np.ndarray:
    rgb = np.zeros(RGB_OBS_DIM) if rgb_data is None else np.asarray(rgb_data, dtype=np.float64)
    depth = np.zeros(DEPTH_OBS_DIM) if depth_data is None else np.asarray(depth_data, dtype=np.float64)
    f_rgb = nn.mlp_forward_np(net.params, "enc_rgb", _ENC_LAYERS, rgb[None, :])
    f_d = nn.mlp_forward_np(net.params, "enc_d", _ENC_LAYERS, depth[None, :])
    phi = nn.mlp_forward_np(net.params, "fuse", _FUSE_LAYERS, np.concatenate([f_rgb, f_d], axis=1), final_relu=True)[0]
    theta = mean_theta()
    for _ in range(net.config.n_iterations):
        x = np.concatenate([phi, theta])[None, :]
        theta = theta + nn.mlp_forward_np(net.params, "reg", _REG_LAYERS, x)[0]
    return theta


# -- batched forward on the autodiff graph (training path) ------------------


def _forward_batch(params: dict[str, ad.Value], config: FusionConfig, obs_rgb: np.ndarray, obs_d: np.ndarray) -> ad.Value:
    nb = obs_rgb.shape[0]
    f_rgb = nn.mlp_forward(params, "enc_rgb", _ENC_LAYERS, ad.constant(obs_rgb))
    f_d = nn.mlp_forward(params, "enc_d", _ENC_LAYERS, ad.constant(obs_d))
    phi = nn.mlp_forward(params, "fuse", _FUSE_LAYERS, ad.concat([f_rgb, f_d], axis=1), final_relu=True)
    theta = ad.constant(np.tile(mean_theta(), (nb, 1)))
    for _ in range(config.n_iterations):
        delta = nn.mlp_forward(params, "reg", _REG_LAYERS, ad.concat([phi, theta], axis=1))
        theta = theta + delta
    return theta


# -- inference bundle -------------------------------------------------------


class FusionModel:
    """Network plus body model and frame registry: sample in, joints out.

    Unlike ``infer``, ``predict_joints`` accepts the fully-voided case and
    returns the network's unconditional output, so noise sweeps stay defined
    at probability 1 on both axes.
    """

    def __init__(self, network: FusionNetwork, body_model: BodyModel, frames: dict):
        self.network = network
        self.body_model = body_model
        self.frames = frames

    def predict_theta(self, sample, void_rgb: bool = False, void_depth: bool = False) -> np.ndarray:
        rgb = sample.rgb_obs.data if (sample.rgb_obs.present and not void_rgb) else None
        depth = sample.depth_obs.data if (sample.depth_obs.present and not void_depth) else None
        return _forward_np(self.network, rgb, depth)

    def predict_joints(self, sample, void_rgb: bool = False, void_depth: bool = False) -> np.ndarray:
        theta = self.predict_theta(sample, void_rgb=void_rgb, void_depth=void_depth)
        pose, shape, _, _, _ = split_theta(theta)
        _, joints = smpl_forward(self.body_model, shape, pose)
        return joints

    def predict_camera_depths(self, sample, void_rgb: bool = False, void_depth: bool = False) -> np.ndarray:
        theta = self.predict_theta(sample, void_rgb=void_rgb, void_depth=void_depth)
        pose, shape, cam_rot, _, _ = split_theta(theta)
        _, joints = smpl_forward(self.body_model, shape, pose)
        r = rotation_matrices(cam_rot[None, :])[0]
        return (joints @ r.T)[:, 2]

    def gt_joints(self, sample) -> np.ndarray:
        if sample.kp3d is None:
            raise ValueError(f"sample {sample.sample_id} carries no 3D annotation")
        return self.frames[sample.frame].to_common(sample.kp3d)


def evaluate_model(
    model: FusionModel,
    samples: Sequence,
    input_mode: str = "rgbd",
    tie_tolerance: float = 0.01,
) -> dict:
    """Reconstruction error and ordinal accuracy under an input mode.

    Modes: "rgbd" uses every present stream, "rgb" voids depth for every
    sample, "depth" voids RGB for every sample. Reconstruction error averages
    over 3D-annotated samples; ordinal accuracy over samples with at least one
    ordered depth relation.
    """
    if input_mode not in ("rgb", "depth", "rgbd"):
        raise ValueError(f"unknown input mode {input_mode!r}")
    void_rgb = input_mode == "depth"
    void_depth = input_mode == "rgb"
    errors = []
    accuracies = []
    for sample in samples:
        if sample.kp3d is not None:
            pred = model.predict_joints(sample, void_rgb=void_rgb, void_depth=void_depth)
            errors.append(reconstruction_error(pred, model.gt_joints(sample)))
        if sample.kp_depths is not None:
            rels = depth_relations(sample.kp_depths, tie_tolerance=tie_tolerance)
            z_pred = model.predict_camera_depths(sample, void_rgb=void_rgb, void_depth=void_depth)
            acc = ordinal_accuracy(z_pred, rels)
            if acc is not None:
                accuracies.append(acc)
    return {
        "input_mode": input_mode,
        "n_samples": len(samples),
        "reconstruction_error_mm": float(np.mean(errors)) if errors else None,
        "ordinal_accuracy": float(np.mean(accuracies)) if accuracies else None,
    }


# -- training ----------------------------------------------------------------


@dataclass
class TrainSettings:
    p_miss: float = 0.3
    tie_tolerance: float = 0.01
    learning_rate: float = 1e-3
    disc_learning_rate: float = 1e-3
    use_smpl_constraints: bool = True
    use_drc: bool = True
    use_adv: bool = True
    use_3d_joint_loss: bool = False
    joint_loss_weight: float = 1.0
    dropout_training: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.p_miss < 0.5:
            raise ValueError(f"p_miss must lie in [0, 0.5), got {self.p_miss}")
        if self.tie_tolerance < 0:
            raise ValueError("tie_tolerance must be non-negative")
        if self.learning_rate <= 0 or self.disc_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if not np.isfinite(self.joint_loss_weight) or self.joint_loss_weight < 0:
            raise ValueError("joint_loss_weight must be finite and non-negative")

    def enabled_components(self) -> list[str]:
        names = ["2d"]
        if self.use_smpl_constraints:
            names.append("smpl")
        if self.use_drc:
            names.append("drc")
        if self.use_adv:
            names.append("adv")
        if self.use_3d_joint_loss:
            names.append("3d")
        return names


class FusionTrainer:
    """Owns the generator and discriminator parameters for one training run.

    ``sample_real`` draws (beta (n,10), theta (n,72)) plausible-parameter
    batches for the discriminator's real side; ``constraints`` maps sample ids
    to generated (beta, theta) pairs used by the parameter-constraint loss.
    All randomness flows through the trainer's generator seeded at
    construction, so identical seeds give bit-identical parameter updates.
    """

    def __init__(
        self,
        network: FusionNetwork,
        body_model: BodyModel,
        frames: dict,
        settings: TrainSettings,
        weights: LossWeights,
        seed: int,
        sample_real: Optional[Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]] = None,
        constraints: Optional[dict] = None,
    ):
        settings.validate()
        weights.validate()
        if settings.use_adv and sample_real is None:
            raise ValueError("use_adv needs a sample_real callable for the discriminator's real side")
        self.network = network
        self.body_model = body_model
        self.frames = frames
        self.settings = settings
        self.weights = weights
        self.params = nn.as_parameters(network.params)
        self.disc = nn.as_parameters(init_discriminator(seed))
        self.opt = nn.Adam(lr=settings.learning_rate)
        self.opt_disc = nn.Adam(lr=settings.disc_learning_rate)
        self.rng = np.random.default_rng(seed)
        self.sample_real = sample_real
        self.constraints = constraints or {}
        self.step_count = 0
        self._relation_cache: dict[str, list] = {}

    def _relations(self, sample):
        cached = self._relation_cache.get(sample.sample_id)
        if cached is None:
            cached = depth_relations(sample.kp_depths, tie_tolerance=self.settings.tie_tolerance)
            self._relation_cache[sample.sample_id] = cached
        return cached

    def _voided_observations(self, batch) -> tuple[np.ndarray, np.ndarray]:
        obs_rgb = np.stack([s.rgb_obs.data for s in batch]).copy()
        obs_d = np.stack([s.depth_obs.data for s in batch]).copy()
        st = self.settings
        for b, sample in enumerate(batch):
            # RGB-only samples already carry a void depth stream and keep RGB.
            if not sample.depth_obs.present:
                continue
            if st.dropout_training and st.p_miss > 0.0:
                mask = select_streams(self.rng, st.p_miss)
                if mask.drop is DropChoice.RGB:
                    obs_rgb[b] = 0.0
                elif mask.drop is DropChoice.DEPTH:
                    obs_d[b] = 0.0
        return obs_rgb, obs_d

    def train_step(self, batch: Sequence) -> dict:
        """One generator update and, when adversarial, one discriminator update.

        Returns the step's loss components as plain floats; components whose
        switch is off are absent from the dict.
        """
        if len(batch) == 0:
            raise ValueError("train_step needs a non-empty batch")
        st = self.settings
        nb = len(batch)
        obs_rgb, obs_d = self._voided_observations(batch)

        theta = _forward_batch(self.params, self.network.config, obs_rgb, obs_d)
        pose = theta.narrow(1, _SL_POSE.start, _SL_POSE.stop)
        shape = theta.narrow(1, _SL_SHAPE.start, _SL_SHAPE.stop)
        cam_rot = theta.narrow(1, _SL_CAM_ROT.start, _SL_CAM_ROT.stop)
        cam_t = theta.narrow(1, _SL_CAM_T.start, _SL_CAM_T.stop)
        cam_s = theta.narrow(1, _IDX_CAM_SCALE, THETA_DIM).reshape((nb,))

        joints = smpl_joints_batch(self.body_model, shape, pose)
        r_cam = rotation_matrices(cam_rot)
        kp2d_pred = camera.project_batch(joints, r_cam, cam_s, cam_t)
        z_pred = camera.depths_batch(joints, r_cam)

        inv_nb = ad.constant(1.0 / nb)
        components: dict[str, ad.Value] = {}
        available: dict[str, bool] = {}

        total_2d = ad.constant(0.0)
        for b, sample in enumerate(batch):
            row = kp2d_pred.narrow(0, b, b + 1).reshape((N_KEYPOINTS, 2))
            l2d, _ = loss_2d(row, sample.kp2d, sample.visibility)
            total_2d = total_2d + l2d
        components["2d"] = total_2d * inv_nb
        available["2d"] = True

        if st.use_drc:
            total_drc = ad.constant(0.0)
            any_drc = False
            for b, sample in enumerate(batch):
                if sample.kp_depths is None:
                    continue
                rels = self._relations(sample)
                if not any(rel.r != 0 for rel in rels):
                    continue
                z_row = z_pred.narrow(0, b, b + 1).reshape((N_KEYPOINTS,))
                total_drc = total_drc + loss_drc(z_row, rels)
                any_drc = True
            components["drc"] = total_drc * inv_nb
            available["drc"] = any_drc

        if st.use_smpl_constraints:
            total_smpl = ad.constant(0.0)
            any_smpl = False
            for b, sample in enumerate(batch):
                pair = self.constraints.get(sample.sample_id)
                if pair is None:
                    continue
                beta_b = shape.narrow(0, b, b + 1).reshape((10,))
                pose_b = pose.narrow(0, b, b + 1).reshape((72,))
                total_smpl = total_smpl + loss_smpl(pair, (beta_b, pose_b))
                any_smpl = True
            components["smpl"] = total_smpl * inv_nb
            available["smpl"] = any_smpl

        if st.use_3d_joint_loss:
            total_3d = ad.constant(0.0)
            any_3d = False
            for b, sample in enumerate(batch):
                if sample.kp3d is None:
                    continue
                gt = self.frames[sample.frame].to_common(sample.kp3d)
                row = joints.narrow(0, b, b + 1).reshape((N_KEYPOINTS, 3))
                total_3d = total_3d + (row - ad.constant(gt)).square().sum()
                any_3d = True
            components["3d"] = total_3d * inv_nb
            available["3d"] = any_3d

        if st.use_adv:
            # The generator trains against a frozen copy of the critic.
            frozen = {k: ad.constant(v.data) for k, v in self.disc.items()}
            rot_flat = rotation_matrices(pose.reshape((nb * 24, 3))).reshape((nb, 216))
            scores_fake = discriminator_forward(frozen, shape, rot_flat)
            components["adv"] = loss_adv(True, scores_fake)
            available["adv"] = True

        total = loss_total(components, self.weights, available)
        # Direct joint supervision sits outside the four-term objective.
        if st.use_3d_joint_loss and available.get("3d", False):
            total = total + ad.constant(st.joint_loss_weight) * components["3d"]
        self.opt.zero_grad(self.params)
        total.backward()
        self.opt.step(self.params)
        for name, p in self.params.items():
            self.network.params[name] = p.data

        out = {name: float(components[name].data) for name in components}
        out["total"] = float(total.data)

        if st.use_adv:
            beta_real, theta_real = self.sample_real(self.rng, nb)
            rot_real = rotation_matrices(np.asarray(theta_real, dtype=np.float64).reshape(nb * 24, 3)).reshape(nb, 216)
            rot_fake = rotation_matrices(pose.data.reshape(nb * 24, 3)).reshape(nb, 216)
            self.opt_disc.zero_grad(self.disc)
            scores_real = discriminator_forward(self.disc, np.asarray(beta_real, dtype=np.float64), rot_real)
            scores_fake = discriminator_forward(self.disc, shape.data.copy(), rot_fake)
            disc_loss = loss_adv(False, scores_fake, scores_real)
            disc_loss.backward()
            self.opt_disc.step(self.disc)
            out["disc"] = float(disc_loss.data)

        self.step_count += 1
        return out

    def save(self, path) -> None:
        arrays = dict(self.network.params)
        arrays.update(nn.as_arrays(self.disc))
        meta = {
            "kind": "fusion_network",
            "feature_dim": self.network.config.feature_dim,
            "fusion_widths": list(self.network.config.resolved_fusion_widths()),
            "regressor_hidden": list(self.network.config.regressor_hidden),
            "n_iterations": self.network.config.n_iterations,
            "step_count": self.step_count,
        }
        checkpoint.save_checkpoint(path, arrays, meta)
