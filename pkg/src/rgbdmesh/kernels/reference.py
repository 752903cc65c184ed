"""Pure-numpy body-model kernels: batched Rodrigues rotations and the fused
shape -> kinematics -> skinning forward pass with hand-derived backward.

These are the hot path of training (called per sample per step), so both the
forward and the reverse pass are written as single fused routines instead of
being traced through the autodiff tape. The compiled backend in ``_speedups``
mirrors this file operation for operation; keep them in sync.

Rotation convention: for axis-angle omega with a = ||omega|| and K = [omega]x,

    R = I + (sin a / a) K + ((1 - cos a) / a^2) K^2

which equals the unit-axis form I + sin a * Ku + (1 - cos a) * Ku^2. The
(1 - cos a)/a^2 factor is evaluated as 2 sin^2(a/2)/a^2 so it stays accurate
for small angles; below ``SMALL_ANGLE`` both factors switch to their
second-order Taylor series.
"""

from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-8
# The backward coefficients (a cos a - sin a)/a^3 and (a sin a - 2(1-cos a))/a^4
# lose roughly a^-2 digits to cancellation, so their series kicks in much
# earlier than the forward one.
SMALL_ANGLE_GRAD = 1e-3


def _cross_matrices(omega: np.ndarray) -> np.ndarray:
    """[omega]x for each row of omega: (J,3) -> (J,3,3)."""
    J = omega.shape[0]
    K = np.zeros((J, 3, 3))
    K[:, 0, 1] = -omega[:, 2]
    K[:, 0, 2] = omega[:, 1]
    K[:, 1, 0] = omega[:, 2]
    K[:, 1, 2] = -omega[:, 0]
    K[:, 2, 0] = -omega[:, 1]
    K[:, 2, 1] = omega[:, 0]
    return K


def _sin_cos_factors(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """c1 = sin a / a and c2 = (1 - cos a) / a^2 with the Taylor fallback."""
    small = a < SMALL_ANGLE
    safe = np.where(small, 1.0, a)
    c1 = np.where(small, 1.0 - a * a / 6.0, np.sin(safe) / safe)
    half = np.sin(safe / 2.0)
    c2 = np.where(small, 0.5 - a * a / 24.0, 2.0 * half * half / (safe * safe))
    return c1, c2


def rodrigues_batch(omega: np.ndarray) -> np.ndarray:
    """Axis-angle rows (J,3) -> rotation matrices (J,3,3)."""
    omega = np.asarray(omega, dtype=np.float64)
    a = np.linalg.norm(omega, axis=1)
    c1, c2 = _sin_cos_factors(a)
    K = _cross_matrices(omega)
    K2 = K @ K
    R = np.eye(3)[None] + c1[:, None, None] * K + c2[:, None, None] * K2
    return R


def _extract_skew(M: np.ndarray) -> np.ndarray:
    """(J,3,3) -> (J,3): the vector v with <[e_i]x, M> = v_i."""
    return np.stack(
        [M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]],
        axis=1,
    )


def rodrigues_batch_backward(omega: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. R (J,3,3) back to axis-angle rows (J,3).

    With c1, c2 as in the forward and their angle derivatives divided by a,
        g1 = (a cos a - sin a) / a^3,   g2 = (a sin a - 2(1 - cos a)) / a^4,
    the gradient is
        domega = (g1 <dR,K> + g2 <dR,K^2>) omega
                 + c1 vee(dR) + c2 vee(dR K^T + K^T dR)
    where vee extracts the skew component (<[e_i]x, M>).
    """
    omega = np.asarray(omega, dtype=np.float64)
    dR = np.asarray(dR, dtype=np.float64)
    a = np.linalg.norm(omega, axis=1)
    c1, c2 = _sin_cos_factors(a)
    small = a < SMALL_ANGLE_GRAD
    safe = np.where(small, 1.0, a)
    a2 = a * a
    g1 = np.where(
        small,
        -1.0 / 3.0 + a2 / 30.0,
        (safe * np.cos(safe) - np.sin(safe)) / (safe**3),
    )
    half = np.sin(safe / 2.0)
    g2 = np.where(
        small,
        -1.0 / 12.0 + a2 / 180.0,
        (safe * np.sin(safe) - 4.0 * half * half) / (safe**4),
    )
    K = _cross_matrices(omega)
    K2 = K @ K
    tK = np.sum(dR * K, axis=(1, 2))
    tK2 = np.sum(dR * K2, axis=(1, 2))
    Kt = np.swapaxes(K, 1, 2)
    mixed = dR @ Kt + Kt @ dR
    domega = (
        (g1 * tK + g2 * tK2)[:, None] * omega
        + c1[:, None] * _extract_skew(dR)
        + c2[:, None] * _extract_skew(mixed)
    )
    return domega


def body_forward(
    template: np.ndarray,
    shape_dirs: np.ndarray,
    joint_regressor: np.ndarray,
    keypoint_regressor: np.ndarray,
    weights: np.ndarray,
    parents: np.ndarray,
    beta: np.ndarray,
    theta: np.ndarray,
):
    """Shape blend, forward kinematics, and linear blend skinning in one pass.

    Returns (vertices (N,3), joints14 (14,3), cache) where cache feeds
    :func:`body_backward`.
    """
    beta = np.asarray(beta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    v_shaped = template + shape_dirs @ beta  # (N,3,10)@(10,) -> (N,3)
    j_rest = joint_regressor @ v_shaped  # (24,3)
    R = rodrigues_batch(theta.reshape(24, 3))
    nj = parents.shape[0]
    W = np.empty((nj, 3, 3))
    p = np.empty((nj, 3))
    W[0] = R[0]
    p[0] = j_rest[0]
    for j in range(1, nj):
        par = parents[j]
        W[j] = W[par] @ R[j]
        p[j] = W[par] @ (j_rest[j] - j_rest[par]) + p[par]
    # Rest-pose correction so theta = 0 reproduces the shaped rest mesh.
    offs = p - np.einsum("jab,jb->ja", W, j_rest)
    verts = np.einsum("nj,jab,nb->na", weights, W, v_shaped) + weights @ offs
    joints14 = keypoint_regressor @ verts
    cache = (v_shaped, j_rest, R, W, p, offs, theta)
    return verts, joints14, cache


def body_backward(
    template: np.ndarray,
    shape_dirs: np.ndarray,
    joint_regressor: np.ndarray,
    keypoint_regressor: np.ndarray,
    weights: np.ndarray,
    parents: np.ndarray,
    cache,
    dverts: np.ndarray | None,
    djoints14: np.ndarray | None,
):
    """Reverse pass of :func:`body_forward` -> (dbeta (10,), dtheta (72,))."""
    v_shaped, j_rest, R, W, p, offs, theta = cache
    nj = parents.shape[0]
    dv = np.zeros_like(v_shaped) if dverts is None else np.array(dverts, dtype=np.float64)
    if djoints14 is not None:
        dv = dv + keypoint_regressor.T @ np.asarray(djoints14, dtype=np.float64)

    # Skinning: verts_n = sum_j w_nj (W_j v_n + offs_j)
    dW = np.einsum("nj,na,nb->jab", weights, dv, v_shaped)
    doffs = weights.T @ dv
    dv_shaped = np.einsum("nj,jab,na->nb", weights, W, dv)

    # offs_j = p_j - W_j j_rest_j
    dp = doffs.copy()
    dW -= np.einsum("ja,jb->jab", doffs, j_rest)
    dj_rest = -np.einsum("jab,ja->jb", W, doffs)

    # Kinematic chain, children before parents.
    dR = np.empty_like(R)
    for j in range(nj - 1, 0, -1):
        par = parents[j]
        dW[par] += dW[j] @ R[j].T + np.outer(dp[j], j_rest[j] - j_rest[par])
        dR[j] = W[par].T @ dW[j]
        dp[par] += dp[j]
        g = W[par].T @ dp[j]
        dj_rest[j] += g
        dj_rest[par] -= g
    dR[0] = dW[0]
    dj_rest[0] += dp[0]

    dv_shaped += joint_regressor.T @ dj_rest
    dbeta = np.einsum("nik,ni->k", shape_dirs, dv_shaped)
    dtheta = rodrigues_batch_backward(theta.reshape(24, 3), dR).reshape(-1)
    return dbeta, dtheta
