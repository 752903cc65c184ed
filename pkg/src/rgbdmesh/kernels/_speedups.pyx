# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled body-model kernels.

Mirrors ``reference.py`` operation for operation; any semantic change must
land in both files. See the reference module for the derivations.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, sqrt

cnp.import_array()

cdef double SMALL_ANGLE = 1e-8
cdef double SMALL_ANGLE_GRAD = 1e-3


cdef inline void _factors(double a, double* c1, double* c2) nogil:
    cdef double half
    if a < SMALL_ANGLE:
        c1[0] = 1.0 - a * a / 6.0
        c2[0] = 0.5 - a * a / 24.0
    else:
        c1[0] = sin(a) / a
        half = sin(a / 2.0)
        c2[0] = 2.0 * half * half / (a * a)


cdef inline void _rot_one(double wx, double wy, double wz, double[:, :] R) nogil:
    cdef double a = sqrt(wx * wx + wy * wy + wz * wz)
    cdef double c1, c2
    _factors(a, &c1, &c2)
    R[0, 0] = 1.0 - c2 * (wy * wy + wz * wz)
    R[0, 1] = -c1 * wz + c2 * wx * wy
    R[0, 2] = c1 * wy + c2 * wx * wz
    R[1, 0] = c1 * wz + c2 * wx * wy
    R[1, 1] = 1.0 - c2 * (wx * wx + wz * wz)
    R[1, 2] = -c1 * wx + c2 * wy * wz
    R[2, 0] = -c1 * wy + c2 * wx * wz
    R[2, 1] = c1 * wx + c2 * wy * wz
    R[2, 2] = 1.0 - c2 * (wx * wx + wy * wy)


def rodrigues_batch(omega):
    """Axis-angle rows (J,3) -> rotation matrices (J,3,3)."""
    cdef double[:, ::1] om = np.ascontiguousarray(omega, dtype=np.float64)
    cdef Py_ssize_t J = om.shape[0], j
    out = np.empty((J, 3, 3))
    cdef double[:, :, ::1] R = out
    for j in range(J):
        _rot_one(om[j, 0], om[j, 1], om[j, 2], R[j])
    return out


def rodrigues_batch_backward(omega, dR):
    """Gradient w.r.t. R (J,3,3) -> gradient w.r.t. axis-angle rows (J,3)."""
    cdef double[:, ::1] om = np.ascontiguousarray(omega, dtype=np.float64)
    cdef double[:, :, ::1] dr = np.ascontiguousarray(dR, dtype=np.float64)
    cdef Py_ssize_t J = om.shape[0], j, r, c, s
    out = np.empty((J, 3))
    cdef double[:, ::1] dom = out
    cdef double wx, wy, wz, a, a2, c1, c2, g1, g2, half
    cdef double K[3][3]
    cdef double K2[3][3]
    cdef double M[3][3]
    cdef double tK, tK2, acc
    for j in range(J):
        wx = om[j, 0]; wy = om[j, 1]; wz = om[j, 2]
        a = sqrt(wx * wx + wy * wy + wz * wz)
        a2 = a * a
        _factors(a, &c1, &c2)
        if a < SMALL_ANGLE_GRAD:
            g1 = -1.0 / 3.0 + a2 / 30.0
            g2 = -1.0 / 12.0 + a2 / 180.0
        else:
            g1 = (a * cos(a) - sin(a)) / (a * a * a)
            half = sin(a / 2.0)
            g2 = (a * sin(a) - 4.0 * half * half) / (a2 * a2)
        K[0][0] = 0.0; K[0][1] = -wz; K[0][2] = wy
        K[1][0] = wz; K[1][1] = 0.0; K[1][2] = -wx
        K[2][0] = -wy; K[2][1] = wx; K[2][2] = 0.0
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for s in range(3):
                    acc += K[r][s] * K[s][c]
                K2[r][c] = acc
        tK = 0.0
        tK2 = 0.0
        for r in range(3):
            for c in range(3):
                tK += dr[j, r, c] * K[r][c]
                tK2 += dr[j, r, c] * K2[r][c]
        # M = dR K^T + K^T dR
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for s in range(3):
                    acc += dr[j, r, s] * K[c][s] + K[s][r] * dr[j, s, c]
                M[r][c] = acc
        dom[j, 0] = (g1 * tK + g2 * tK2) * wx + c1 * (dr[j, 2, 1] - dr[j, 1, 2]) + c2 * (M[2][1] - M[1][2])
        dom[j, 1] = (g1 * tK + g2 * tK2) * wy + c1 * (dr[j, 0, 2] - dr[j, 2, 0]) + c2 * (M[0][2] - M[2][0])
        dom[j, 2] = (g1 * tK + g2 * tK2) * wz + c1 * (dr[j, 1, 0] - dr[j, 0, 1]) + c2 * (M[1][0] - M[0][1])
    return out


def body_forward(template, shape_dirs, joint_regressor, keypoint_regressor,
                 weights, parents, beta, theta):
    """Fused shape blend + forward kinematics + skinning.

    Returns (vertices (N,3), joints14 (14,3), cache).
    """
    cdef double[:, ::1] tpl = np.ascontiguousarray(template, dtype=np.float64)
    cdef double[:, :, ::1] sd = np.ascontiguousarray(shape_dirs, dtype=np.float64)
    cdef double[:, ::1] jr = np.ascontiguousarray(joint_regressor, dtype=np.float64)
    cdef double[:, ::1] kr = np.ascontiguousarray(keypoint_regressor, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef cnp.intp_t[::1] par = np.ascontiguousarray(parents, dtype=np.intp)
    cdef double[::1] bt = np.ascontiguousarray(beta, dtype=np.float64)
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)

    cdef Py_ssize_t N = tpl.shape[0], nj = par.shape[0], nk = kr.shape[0]
    cdef Py_ssize_t nshape = sd.shape[2]
    cdef Py_ssize_t n, i, k, j, r, c, s, pj

    v_shaped_arr = np.empty((N, 3))
    cdef double[:, ::1] v_shaped = v_shaped_arr
    cdef double acc
    for n in range(N):
        for i in range(3):
            acc = tpl[n, i]
            for k in range(nshape):
                acc += sd[n, i, k] * bt[k]
            v_shaped[n, i] = acc

    j_rest_arr = np.empty((nj, 3))
    cdef double[:, ::1] j_rest = j_rest_arr
    for j in range(nj):
        for i in range(3):
            acc = 0.0
            for n in range(N):
                acc += jr[j, n] * v_shaped[n, i]
            j_rest[j, i] = acc

    theta_arr = np.asarray(th).copy()
    R_arr = np.empty((nj, 3, 3))
    cdef double[:, :, ::1] R = R_arr
    for j in range(nj):
        _rot_one(th[3 * j], th[3 * j + 1], th[3 * j + 2], R[j])

    W_arr = np.empty((nj, 3, 3))
    p_arr = np.empty((nj, 3))
    cdef double[:, :, ::1] W = W_arr
    cdef double[:, ::1] p = p_arr
    cdef double d0, d1, d2
    for r in range(3):
        p[0, r] = j_rest[0, r]
        for c in range(3):
            W[0, r, c] = R[0, r, c]
    for j in range(1, nj):
        pj = par[j]
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for s in range(3):
                    acc += W[pj, r, s] * R[j, s, c]
                W[j, r, c] = acc
        d0 = j_rest[j, 0] - j_rest[pj, 0]
        d1 = j_rest[j, 1] - j_rest[pj, 1]
        d2 = j_rest[j, 2] - j_rest[pj, 2]
        for r in range(3):
            p[j, r] = W[pj, r, 0] * d0 + W[pj, r, 1] * d1 + W[pj, r, 2] * d2 + p[pj, r]

    offs_arr = np.empty((nj, 3))
    cdef double[:, ::1] offs = offs_arr
    for j in range(nj):
        for r in range(3):
            offs[j, r] = p[j, r] - (
                W[j, r, 0] * j_rest[j, 0] + W[j, r, 1] * j_rest[j, 1] + W[j, r, 2] * j_rest[j, 2]
            )

    verts_arr = np.zeros((N, 3))
    cdef double[:, ::1] verts = verts_arr
    cdef double wn
    for n in range(N):
        for j in range(nj):
            wn = w[n, j]
            if wn == 0.0:
                continue
            for r in range(3):
                verts[n, r] += wn * (
                    W[j, r, 0] * v_shaped[n, 0]
                    + W[j, r, 1] * v_shaped[n, 1]
                    + W[j, r, 2] * v_shaped[n, 2]
                    + offs[j, r]
                )

    joints_arr = np.empty((nk, 3))
    cdef double[:, ::1] joints14 = joints_arr
    for k in range(nk):
        for i in range(3):
            acc = 0.0
            for n in range(N):
                acc += kr[k, n] * verts[n, i]
            joints14[k, i] = acc

    cache = (v_shaped_arr, j_rest_arr, R_arr, W_arr, p_arr, offs_arr, theta_arr)
    return verts_arr, joints_arr, cache


def body_backward(template, shape_dirs, joint_regressor, keypoint_regressor,
                  weights, parents, cache, dverts, djoints14):
    """Reverse pass of body_forward -> (dbeta, dtheta)."""
    cdef double[:, :, ::1] sd = np.ascontiguousarray(shape_dirs, dtype=np.float64)
    cdef double[:, ::1] jr = np.ascontiguousarray(joint_regressor, dtype=np.float64)
    cdef double[:, ::1] kr = np.ascontiguousarray(keypoint_regressor, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef cnp.intp_t[::1] par = np.ascontiguousarray(parents, dtype=np.intp)

    v_shaped_arr, j_rest_arr, R_arr, W_arr, p_arr, offs_arr, theta_arr = cache
    cdef double[:, ::1] v_shaped = v_shaped_arr
    cdef double[:, ::1] j_rest = j_rest_arr
    cdef double[:, :, ::1] R = R_arr
    cdef double[:, :, ::1] W = W_arr

    cdef Py_ssize_t N = v_shaped.shape[0], nj = par.shape[0], nk = kr.shape[0]
    cdef Py_ssize_t nshape = sd.shape[2]
    cdef Py_ssize_t n, i, k, j, r, c, s, pj
    cdef double acc

    dv_arr = np.zeros((N, 3)) if dverts is None else np.array(dverts, dtype=np.float64)
    cdef double[:, ::1] dv = dv_arr
    cdef double[:, ::1] dj14
    if djoints14 is not None:
        dj14 = np.ascontiguousarray(djoints14, dtype=np.float64)
        for n in range(N):
            for i in range(3):
                for k in range(nk):
                    dv[n, i] += kr[k, n] * dj14[k, i]

    dW_arr = np.zeros((nj, 3, 3))
    doffs_arr = np.zeros((nj, 3))
    dvs_arr = np.zeros((N, 3))
    cdef double[:, :, ::1] dW = dW_arr
    cdef double[:, ::1] doffs = doffs_arr
    cdef double[:, ::1] dvs = dvs_arr
    cdef double wn
    for n in range(N):
        for j in range(nj):
            wn = w[n, j]
            if wn == 0.0:
                continue
            for r in range(3):
                for c in range(3):
                    dW[j, r, c] += wn * dv[n, r] * v_shaped[n, c]
                doffs[j, r] += wn * dv[n, r]
            for c in range(3):
                dvs[n, c] += wn * (
                    W[j, 0, c] * dv[n, 0] + W[j, 1, c] * dv[n, 1] + W[j, 2, c] * dv[n, 2]
                )

    dp_arr = doffs_arr.copy()
    djr_arr = np.zeros((nj, 3))
    cdef double[:, ::1] dp = dp_arr
    cdef double[:, ::1] djr = djr_arr
    for j in range(nj):
        for r in range(3):
            for c in range(3):
                dW[j, r, c] -= doffs[j, r] * j_rest[j, c]
        for c in range(3):
            djr[j, c] -= (
                W[j, 0, c] * doffs[j, 0] + W[j, 1, c] * doffs[j, 1] + W[j, 2, c] * doffs[j, 2]
            )

    dR_arr = np.empty((nj, 3, 3))
    cdef double[:, :, ::1] dR = dR_arr
    cdef double g0, g1v, g2v, d0, d1, d2
    for j in range(nj - 1, 0, -1):
        pj = par[j]
        d0 = j_rest[j, 0] - j_rest[pj, 0]
        d1 = j_rest[j, 1] - j_rest[pj, 1]
        d2 = j_rest[j, 2] - j_rest[pj, 2]
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for s in range(3):
                    acc += dW[j, r, s] * R[j, c, s]
                dW[pj, r, c] += acc
            dW[pj, r, 0] += dp[j, r] * d0
            dW[pj, r, 1] += dp[j, r] * d1
            dW[pj, r, 2] += dp[j, r] * d2
        for r in range(3):
            for c in range(3):
                acc = 0.0
                for s in range(3):
                    acc += W[pj, s, r] * dW[j, s, c]
                dR[j, r, c] = acc
        for r in range(3):
            dp[pj, r] += dp[j, r]
        g0 = W[pj, 0, 0] * dp[j, 0] + W[pj, 1, 0] * dp[j, 1] + W[pj, 2, 0] * dp[j, 2]
        g1v = W[pj, 0, 1] * dp[j, 0] + W[pj, 1, 1] * dp[j, 1] + W[pj, 2, 1] * dp[j, 2]
        g2v = W[pj, 0, 2] * dp[j, 0] + W[pj, 1, 2] * dp[j, 1] + W[pj, 2, 2] * dp[j, 2]
        djr[j, 0] += g0; djr[j, 1] += g1v; djr[j, 2] += g2v
        djr[pj, 0] -= g0; djr[pj, 1] -= g1v; djr[pj, 2] -= g2v
    for r in range(3):
        for c in range(3):
            dR[0, r, c] = dW[0, r, c]
        djr[0, r] += dp[0, r]

    for n in range(N):
        for i in range(3):
            acc = 0.0
            for j in range(nj):
                acc += jr[j, n] * djr[j, i]
            dvs[n, i] += acc

    dbeta_arr = np.zeros(nshape)
    cdef double[::1] dbeta = dbeta_arr
    for n in range(N):
        for i in range(3):
            for k in range(nshape):
                dbeta[k] += sd[n, i, k] * dvs[n, i]

    dtheta = rodrigues_batch_backward(np.asarray(theta_arr).reshape(nj, 3), dR_arr).reshape(-1)
    return dbeta_arr, dtheta
