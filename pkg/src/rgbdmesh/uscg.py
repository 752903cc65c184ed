"""Constraint generator: root-relative 3D keypoints -> body parameters.

A deep fully connected network G maps a root-relative 14-joint skeleton to
(beta, theta). Training enforces joints-cycle consistency: pushing G's output
back through the body model must reproduce the input skeleton. At generation
time a Procrustes-aligned MPJPE gate filters out poor fits, so downstream
training only ever sees parameter constraints the body model can actually
explain.

Inputs are additionally divided by the skeleton's mean bone length before the
network. Root-relativization alone does not survive the meter-vs-millimeter
conventions of different sources; the scale is reapplied (errors are computed
on the unnormalized skeletons) so the gate still measures metric error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint, nn
from .body import (
    BodyModel,
    KEYPOINT_EDGES,
    N_KEYPOINTS,
    N_POSE,
    N_SHAPE,
    rotation_matrices,
    smpl_forward,
    smpl_joints_batch,
)
from .data import DatasetFrame
from .metrics import reconstruction_error

__all__ = [
    "DEFAULT_ROOT_INDEX",
    "UscgConfig",
    "UscgNetwork",
    "UscgTrainConfig",
    "GeneratedConstraint",
    "root_relativize",
    "mean_bone_length",
    "uscg_forward",
    "uscg_train",
    "generate_constraint",
    "generate_constraints_for_samples",
    "write_constraints",
    "read_constraints",
]

# Right hip in the 14-keypoint order serves as the root joint.
DEFAULT_ROOT_INDEX = 2

_IN_DIM = N_KEYPOINTS * 3
_OUT_DIM = N_SHAPE + N_POSE


@dataclass
class UscgConfig:
    hidden_width: int = 256
    n_layers: int = 10
    root_index: int = DEFAULT_ROOT_INDEX

    def validate(self) -> None:
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be positive")
        if self.n_layers < 2:
            raise ValueError("n_layers must be at least 2")
        if not 0 <= self.root_index < N_KEYPOINTS:
            raise ValueError(f"root_index must index the {N_KEYPOINTS}-joint skeleton")

    def sizes(self) -> list[int]:
        return [_IN_DIM] + [self.hidden_width] * (self.n_layers - 1) + [_OUT_DIM]


class UscgNetwork:
    """Parameter container for the constraint generator."""

    def __init__(self, params: dict[str, np.ndarray], config: UscgConfig):
        config.validate()
        self.params = params
        self.config = config

    @classmethod
    def init(cls, seed: int, config: Optional[UscgConfig] = None) -> "UscgNetwork":
        config = config or UscgConfig()
        config.validate()
        rng = np.random.default_rng(seed)
        return cls(nn.init_mlp(rng, config.sizes(), "uscg"), config)

    def save(self, path) -> None:
        meta = {
            "kind": "uscg_network",
            "hidden_width": self.config.hidden_width,
            "n_layers": self.config.n_layers,
            "root_index": self.config.root_index,
        }
        checkpoint.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "UscgNetwork":
        arrays, meta = checkpoint.load_checkpoint(path)
        if meta.get("kind") != "uscg_network":
            raise ValueError(f"{path} is not a constraint generator checkpoint")
        config = UscgConfig(
            hidden_width=int(meta["hidden_width"]),
            n_layers=int(meta["n_layers"]),
            root_index=int(meta["root_index"]),
        )
        return cls(arrays, config)


# -- input canonicalization --------------------------------------------------


def root_relativize(joints3d, root_index: int = DEFAULT_ROOT_INDEX):
    """Subtract the root joint row; the output root row is exactly zero."""
    if not 0 <= root_index < N_KEYPOINTS:
        raise ValueError(f"root_index {root_index} outside the {N_KEYPOINTS}-joint skeleton")
    if isinstance(joints3d, ad.Value):
        root = joints3d.narrow(0, root_index, root_index + 1)
        ones = ad.constant(np.ones((N_KEYPOINTS, 1)))
        return joints3d - ad.matmul(ones, root)
    j = np.asarray(joints3d, dtype=np.float64)
    return j - j[root_index]


def mean_bone_length(joints3d):
    """Mean edge length of the keypoint skeleton; the normalization scale."""
    if isinstance(joints3d, ad.Value):
        total = ad.constant(0.0)
        for a, b in KEYPOINT_EDGES:
            d = joints3d.narrow(0, a, a + 1) - joints3d.narrow(0, b, b + 1)
            total = total + d.square().sum().sqrt()
        return total * ad.constant(1.0 / len(KEYPOINT_EDGES))
    j = np.asarray(joints3d, dtype=np.float64)
    edges = np.array(KEYPOINT_EDGES)
    return float(np.mean(np.linalg.norm(j[edges[:, 0]] - j[edges[:, 1]], axis=1)))


def uscg_forward(net: UscgNetwork, j_rel, params: Optional[dict[str, ad.Value]] = None):
    """Root-relative joints -> (beta (10,), theta (72,)).

    Plain arrays run a numpy forward; passing ``params`` (Values) or a Value
    input builds the autodiff graph instead, normalization included.
    """
    n_layers = net.config.n_layers
    if params is not None or isinstance(j_rel, ad.Value):
        j = j_rel if isinstance(j_rel, ad.Value) else ad.constant(np.asarray(j_rel, dtype=np.float64))
        scale = mean_bone_length(j)
        x = (j * (ad.constant(1.0) / scale)).reshape((1, _IN_DIM))
        p = params if params is not None else nn.as_parameters(net.params)
        out = nn.mlp_forward(p, "uscg", n_layers, x).reshape((_OUT_DIM,))
        return out.narrow(0, 0, N_SHAPE), out.narrow(0, N_SHAPE, _OUT_DIM)
    j = np.asarray(j_rel, dtype=np.float64)
    scale = mean_bone_length(j)
    if not scale > 0.0:
        raise ValueError("degenerate skeleton: zero mean bone length")
    out = nn.mlp_forward_np(net.params, "uscg", n_layers, (j / scale).reshape(1, _IN_DIM))[0]
    return out[:N_SHAPE], out[N_SHAPE:]


# -- training ----------------------------------------------------------------


@dataclass
class UscgTrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    n_steps: int = 2000
    param_weight: float = 1.0
    cycle_weight: float = 1.0
    rotmat_pose_term: bool = False
    val_fraction: float = 0.1
    eval_every: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.n_steps < 1 or self.eval_every < 1:
            raise ValueError("batch_size, n_steps and eval_every must be positive")
        if self.param_weight < 0 or self.cycle_weight < 0:
            raise ValueError("term weights must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


def _prepare_pairs(paired_data, root_index: int):
    j_rel = np.empty((len(paired_data), N_KEYPOINTS, 3))
    betas = np.empty((len(paired_data), N_SHAPE))
    thetas = np.empty((len(paired_data), N_POSE))
    for i, (joints, beta, theta) in enumerate(paired_data):
        rel = root_relativize(np.asarray(joints, dtype=np.float64), root_index)
        scale = mean_bone_length(rel)
        if not scale > 0.0:
            raise ValueError(f"paired sample {i} has a degenerate skeleton")
        j_rel[i] = rel
        betas[i] = beta
        thetas[i] = theta
    return j_rel, betas, thetas


def _batch_objective(
    params: dict[str, ad.Value],
    net: UscgNetwork,
    model: BodyModel,
    j_rel: np.ndarray,
    betas: np.ndarray,
    thetas: np.ndarray,
    config: UscgTrainConfig,
) -> ad.Value:
    """Mean over the batch of parameter distance plus joints-cycle distance."""
    nb = j_rel.shape[0]
    root = net.config.root_index
    scales = np.array([mean_bone_length(j) for j in j_rel])
    x = (j_rel / scales[:, None, None]).reshape(nb, _IN_DIM)
    out = nn.mlp_forward(params, "uscg", net.config.n_layers, ad.constant(x))
    beta_hat = out.narrow(1, 0, N_SHAPE)
    theta_hat = out.narrow(1, N_SHAPE, _OUT_DIM)

    loss = ad.constant(0.0)
    if config.param_weight > 0:
        param_term = (beta_hat - ad.constant(betas)).square().sum()
        if config.rotmat_pose_term:
            rot_hat = rotation_matrices(theta_hat.reshape((nb * 24, 3)))
            rot_gt = rotation_matrices(thetas.reshape(nb * 24, 3))
            param_term = param_term + (rot_hat - ad.constant(rot_gt)).square().sum()
        else:
            param_term = param_term + (theta_hat - ad.constant(thetas)).square().sum()
        loss = loss + ad.constant(config.param_weight) * param_term
    if config.cycle_weight > 0:
        j_hat = smpl_joints_batch(model, beta_hat, theta_hat)
        root_rows = j_hat.narrow(1, root, root + 1)
        ones = ad.constant(np.ones((nb, N_KEYPOINTS, 1)))
        j_hat_rel = j_hat - ad.matmul(ones, root_rows)
        cycle_term = (j_hat_rel - ad.constant(j_rel)).square().sum()
        loss = loss + ad.constant(config.cycle_weight) * cycle_term
    return loss * ad.constant(1.0 / nb)


def _objective_np(
    net: UscgNetwork,
    model: BodyModel,
    j_rel: np.ndarray,
    betas: np.ndarray,
    thetas: np.ndarray,
    config: UscgTrainConfig,
) -> float:
    """Evaluation-only twin of _batch_objective."""
    total = 0.0
    root = net.config.root_index
    for i in range(j_rel.shape[0]):
        beta_hat, theta_hat = uscg_forward(net, j_rel[i])
        if config.param_weight > 0:
            term = float(np.sum((beta_hat - betas[i]) ** 2))
            if config.rotmat_pose_term:
                rh = rotation_matrices(theta_hat.reshape(24, 3))
                rg = rotation_matrices(thetas[i].reshape(24, 3))
                term += float(np.sum((rh - rg) ** 2))
            else:
                term += float(np.sum((theta_hat - thetas[i]) ** 2))
            total += config.param_weight * term
        if config.cycle_weight > 0:
            _, j_hat = smpl_forward(model, beta_hat, theta_hat)
            j_hat_rel = j_hat - j_hat[root]
            total += config.cycle_weight * float(np.sum((j_hat_rel - j_rel[i]) ** 2))
    return total / j_rel.shape[0]


def uscg_train(
    net: UscgNetwork,
    paired_data: Sequence,
    config: UscgTrainConfig,
    model: BodyModel,
) -> tuple[UscgNetwork, list[dict]]:
    """Fit the generator on (joints, beta, theta) triples; returns a loss curve.

    The curve holds {step, train_loss, val_loss} entries at evaluation points;
    val_loss is None when the validation split is empty.
    """
    config.validate()
    if len(paired_data) == 0:
        raise ValueError("uscg_train needs at least one paired sample")
    root = net.config.root_index
    j_rel, betas, thetas = _prepare_pairs(paired_data, root)

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(paired_data))
    n_val = int(round(len(paired_data) * config.val_fraction))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if train_idx.size == 0:
        raise ValueError("validation split consumed every sample; lower val_fraction")

    params = nn.as_parameters(net.params)
    opt = nn.Adam(lr=config.learning_rate)
    curve: list[dict] = []
    for step in range(1, config.n_steps + 1):
        batch_idx = rng.choice(train_idx, size=min(config.batch_size, train_idx.size), replace=False)
        loss = _batch_objective(params, net, model, j_rel[batch_idx], betas[batch_idx], thetas[batch_idx], config)
        opt.zero_grad(params)
        loss.backward()
        opt.step(params)
        if step % config.eval_every == 0 or step == config.n_steps:
            for name, p in params.items():
                net.params[name] = p.data
            val_loss = (
                _objective_np(net, model, j_rel[val_idx], betas[val_idx], thetas[val_idx], config)
                if val_idx.size
                else None
            )
            curve.append({"step": step, "train_loss": float(loss.data), "val_loss": val_loss})
    for name, p in params.items():
        net.params[name] = p.data
    return net, curve


# -- constraint generation ---------------------------------------------------


@dataclass(frozen=True)
class GeneratedConstraint:
    beta_tilde: np.ndarray
    theta_tilde: np.ndarray
    cycle_error_mm: float
    accepted: bool


def generate_constraint(
    net: UscgNetwork,
    joints3d: np.ndarray,
    frame: DatasetFrame,
    threshold_mm: float,
    model: BodyModel,
) -> GeneratedConstraint:
    """Native-frame joints -> gated parameter constraint.

    Maps to the common frame, predicts parameters, rebuilds the skeleton
    through the body model and measures the Procrustes-aligned MPJPE between
    input and rebuilt joints. Degenerate skeletons are rejected with an
    infinite cycle error rather than gated.
    """
    joints_m = frame.to_common(joints3d)
    j_rel = root_relativize(joints_m, net.config.root_index)
    if not mean_bone_length(j_rel) > 1e-12:
        zeros = GeneratedConstraint(np.zeros(N_SHAPE), np.zeros(N_POSE), math.inf, False)
        return zeros
    beta_tilde, theta_tilde = uscg_forward(net, j_rel)
    _, j_hat = smpl_forward(model, beta_tilde, theta_tilde)
    try:
        error = reconstruction_error(j_hat, joints_m)
    except ValueError:
        return GeneratedConstraint(beta_tilde, theta_tilde, math.inf, False)
    return GeneratedConstraint(beta_tilde, theta_tilde, float(error), bool(error <= threshold_mm))


def generate_constraints_for_samples(
    net: UscgNetwork,
    samples: Sequence,
    frame: DatasetFrame,
    threshold_mm: float,
    model: BodyModel,
) -> list[dict]:
    """Run the gate over 3D-annotated samples -> serializable records."""
    records = []
    for sample in samples:
        if sample.kp3d is None:
            continue
        c = generate_constraint(net, sample.kp3d, frame, threshold_mm, model)
        records.append(
            {
                "sample_id": sample.sample_id,
                "beta_tilde": [float(v) for v in c.beta_tilde],
                "theta_tilde": [float(v) for v in c.theta_tilde],
                "cycle_error_mm": None if not math.isfinite(c.cycle_error_mm) else float(c.cycle_error_mm),
                "accepted": c.accepted,
            }
        )
    return records


def write_constraints(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False))
            fh.write("\n")


def read_constraints(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record["cycle_error_mm"] is None:
                record["cycle_error_mm"] = math.inf
            records.append(record)
    return records


def accepted_constraint_map(records: Sequence[dict]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """sample_id -> (beta, theta) for accepted records, as the trainer consumes."""
    out = {}
    for record in records:
        if record["accepted"]:
            out[record["sample_id"]] = (
                np.array(record["beta_tilde"], dtype=np.float64),
                np.array(record["theta_tilde"], dtype=np.float64),
            )
    return out
