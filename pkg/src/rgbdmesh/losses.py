"""Training objectives: 2D keypoint loss, parameter-constraint loss, depth
ranking consistency, a small adversarial term, and their weighted sum.

Conventions:
  - depths are camera-frame z in meters; a relation r = +1 for pair (p, q)
    means joint p is closer to the camera than q.
  - pairs with r = 0 contribute a constant log 2 and zero gradient to the
    ranking loss, so they are skipped; reported values follow that
    convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from . import nn

TIE_TOLERANCE = 0.01  # meters; 0 reproduces the strict equality rule

N_DISC_INPUT = 10 + 23 * 9  # beta plus non-root rotation matrices
DISC_HIDDEN = 32


@dataclass
class DepthRankRelation:
    """Ground-truth depth ordering of one joint pair."""

    pair: tuple[int, int]
    r: int

    def __post_init__(self):
        p, q = self.pair
        if not p < q:
            raise ValueError(f"relation pairs need p < q, got {self.pair}")
        if self.r not in (-1, 0, 1):
            raise ValueError(f"relation r must be -1, 0, or +1, got {self.r}")


@dataclass
class LossWeights:
    lambda_2d: float = 10.0
    lambda_smpl: float = 1.0
    lambda_drc: float = 1.0
    lambda_adv: float = 0.1

    def validate(self) -> None:
        for name in ("lambda_2d", "lambda_smpl", "lambda_drc", "lambda_adv"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _lift(x) -> ad.Value:
    return x if isinstance(x, ad.Value) else ad.constant(x)


# -- 2D keypoints ----------------------------------------------------------


def loss_2d(pred_kp, gt_kp, visibility) -> tuple[ad.Value, int]:
    """Mean L1 distance over visible joints -> (loss, n_visible).

    n_visible == 0 yields a constant zero that contributes no gradient.
    """
    vis = np.asarray(visibility, dtype=bool)
    n_visible = int(vis.sum())
    if n_visible == 0:
        return ad.constant(0.0), 0
    pred = _lift(pred_kp)
    gt = _lift(gt_kp)
    per_coord = (pred - gt).abs()  # (14,2)
    mask = ad.constant(np.repeat(vis.astype(np.float64).reshape(-1, 1), 2, axis=1))
    total = (per_coord * mask).sum()
    return total * ad.constant(1.0 / n_visible), n_visible


# -- parameter constraints -------------------------------------------------


def loss_smpl(generated, predicted) -> ad.Value:
    """Squared L2 distance between 82-dim parameter vectors, batch-summed.

    Each argument is a (beta, theta) pair; arrays may be single (10,), (72,)
    or batched (B,10), (B,72). Differentiable in the predicted pair.
    """
    gb, gt = (_lift(x) for x in generated)
    pb, pt = (_lift(x) for x in predicted)
    if gb.shape != pb.shape or gt.shape != pt.shape:
        raise ad.ShapeError("loss_smpl", gb.shape, pb.shape)
    return ((pb - gb).square().sum()) + ((pt - gt).square().sum())


# -- depth ranking ---------------------------------------------------------


def rank_relation(z_d_p: float, z_d_q: float, tie_tolerance: float = TIE_TOLERANCE) -> int:
    """Eq-style ordering: +1 when p is closer, -1 when q is, 0 on a tie."""
    diff = z_d_p - z_d_q
    if abs(diff) <= tie_tolerance:
        return 0
    return 1 if diff < 0 else -1


def depth_relations(
    depths, valid=None, tie_tolerance: float = TIE_TOLERANCE
) -> list[DepthRankRelation]:
    """All non-repetitive pairs (p < q) among jointly valid depths."""
    z = np.asarray(depths, dtype=np.float64)
    ok = np.ones(z.shape[0], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    ok = ok & np.isfinite(z)
    return [
        DepthRankRelation((p, q), rank_relation(z[p], z[q], tie_tolerance))
        for p, q in combinations(range(z.shape[0]), 2)
        if ok[p] and ok[q]
    ]


def loss_drc(z_J, relations: list[DepthRankRelation]) -> ad.Value:
    """Sum of log(1 + exp(r * (z_p - z_q))) over relations with r != 0."""
    pairs = [(rel.pair[0], rel.pair[1], rel.r) for rel in relations if rel.r != 0]
    if not pairs:
        return ad.constant(0.0)
    z = _lift(z_J)
    n = z.size
    M = np.zeros((len(pairs), n))
    for i, (p, q, r) in enumerate(pairs):
        M[i, p] = r
        M[i, q] = -r
    margins = ad.matmul(ad.constant(M), z.reshape((n, 1)))
    return margins.softplus().sum()


# -- adversarial -----------------------------------------------------------


def init_discriminator(seed: int = 0, hidden: int = DISC_HIDDEN) -> dict[str, np.ndarray]:
    """Two hidden layers over (beta, non-root rotations) -> one logit."""
    rng = np.random.default_rng(seed)
    return nn.init_mlp(rng, [N_DISC_INPUT, hidden, hidden, 1], "disc")


def discriminator_forward(weights, beta, theta_rotations) -> ad.Value:
    """Realism score in (0, 1).

    ``theta_rotations`` is the flattened (24*9,) rotation-matrix form of the
    pose; the root rotation (first 9 entries) is dropped so realism is judged
    independently of global orientation. Accepts batched (B,10)/(B,216)
    inputs, returning (B,1).
    """
    params = {k: _lift(v) for k, v in weights.items()}
    b = _lift(beta)
    rots = _lift(theta_rotations)
    single = b.data.ndim == 1
    if single:
        b = b.reshape((1, b.size))
        rots = rots.reshape((1, rots.size))
    rots = rots.narrow(1, 9, rots.shape[1])
    x = ad.concat([b, rots], axis=1)
    logits = nn.mlp_forward(params, "disc", 3, x)
    scores = logits.sigmoid()
    return scores.reshape(()) if single else scores


def loss_adv(generator_side: bool, scores_fake, scores_real=None) -> ad.Value:
    """Least-squares adversarial objective.

    Generator side: mean (fake - 1)^2. Discriminator side:
    mean (real - 1)^2 + mean fake^2.
    """
    fake = _lift(scores_fake)
    one = ad.constant(1.0)
    if generator_side:
        return (fake - one).square().mean()
    if scores_real is None:
        raise ValueError("discriminator side needs scores_real")
    real = _lift(scores_real)
    return (real - one).square().mean() + fake.square().mean()


# -- combined objective ----------------------------------------------------

COMPONENT_NAMES = ("2d", "smpl", "drc", "adv")


def loss_total(
    components: dict[str, ad.Value],
    weights: LossWeights,
    available: dict[str, bool] | None = None,
) -> ad.Value:
    """Weighted sum over available components.

    ``available`` marks components whose annotations exist for the sample
    (e.g. no parameter constraint when the constraint generator rejected the
    fit; no ranking loss without depth). Missing entries default to
    available.
    """
    weights.validate()
    lam = {
        "2d": weights.lambda_2d,
        "smpl": weights.lambda_smpl,
        "drc": weights.lambda_drc,
        "adv": weights.lambda_adv,
    }
    total = ad.constant(0.0)
    for name in COMPONENT_NAMES:
        if name not in components:
            continue
        if available is not None and not available.get(name, True):
            continue
        if lam[name] == 0.0:
            continue
        total = total + ad.constant(lam[name]) * components[name]
    return total
