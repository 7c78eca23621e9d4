# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled reprojection residual/Jacobian kernel (hot loop of bundle
adjustment). Semantics match _reproj_np.reproj_residual_jacobian exactly."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def reproj_residual_jacobian(double[:, :, ::1] Rs, double[:, ::1] ts,
                             double[:, ::1] pts, long long[::1] cam_idx,
                             long long[::1] pt_idx, double[:, ::1] uv,
                             double fx, double fy, double cx, double cy):
    cdef Py_ssize_t n = cam_idx.shape[0]
    res_arr = np.zeros((n, 2))
    jc_arr = np.zeros((n, 2, 6))
    jp_arr = np.zeros((n, 2, 3))
    z_arr = np.zeros(n)
    cdef double[:, ::1] res = res_arr
    cdef double[:, :, ::1] Jc = jc_arr
    cdef double[:, :, ::1] Jp = jp_arr
    cdef double[::1] zv = z_arr

    cdef Py_ssize_t i, r, c, ci, pi
    cdef double x0, x1, x2, X0, X1, X2, v0, v1, v2, z
    cdef double a00, a02, a11, a12
    for i in range(n):
        ci = cam_idx[i]
        pi = pt_idx[i]
        X0 = pts[pi, 0]
        X1 = pts[pi, 1]
        X2 = pts[pi, 2]
        v0 = Rs[ci, 0, 0] * X0 + Rs[ci, 0, 1] * X1 + Rs[ci, 0, 2] * X2
        v1 = Rs[ci, 1, 0] * X0 + Rs[ci, 1, 1] * X1 + Rs[ci, 1, 2] * X2
        v2 = Rs[ci, 2, 0] * X0 + Rs[ci, 2, 1] * X1 + Rs[ci, 2, 2] * X2
        x0 = v0 + ts[ci, 0]
        x1 = v1 + ts[ci, 1]
        x2 = v2 + ts[ci, 2]
        zv[i] = x2
        if x2 <= 1e-12:
            continue
        z = x2
        res[i, 0] = fx * x0 / z + cx - uv[i, 0]
        res[i, 1] = fy * x1 / z + cy - uv[i, 1]

        a00 = fx / z
        a02 = -fx * x0 / (z * z)
        a11 = fy / z
        a12 = -fy * x1 / (z * z)

        # Jc[:, :3] = -A @ skew(v); skew rows built inline
        Jc[i, 0, 0] = a02 * v1
        Jc[i, 0, 1] = a00 * v2 - a02 * v0
        Jc[i, 0, 2] = -a00 * v1
        Jc[i, 1, 0] = -a11 * v2 + a12 * v1
        Jc[i, 1, 1] = -a12 * v0
        Jc[i, 1, 2] = a11 * v0
        Jc[i, 0, 3] = a00
        Jc[i, 0, 4] = 0.0
        Jc[i, 0, 5] = a02
        Jc[i, 1, 3] = 0.0
        Jc[i, 1, 4] = a11
        Jc[i, 1, 5] = a12

        for c in range(3):
            Jp[i, 0, c] = a00 * Rs[ci, 0, c] + a02 * Rs[ci, 2, c]
            Jp[i, 1, c] = a11 * Rs[ci, 1, c] + a12 * Rs[ci, 2, c]
    return res_arr, jc_arr, jp_arr, z_arr
