"""Pure-numpy implementation of the reprojection residual/Jacobian kernel."""
import numpy as np


def reproj_residual_jacobian(Rs, ts, pts, cam_idx, pt_idx, uv, fx, fy, cx, cy):
    """Residuals and analytic Jacobians for a batch of observations.

    Parameters: per-camera rotation matrices (C,3,3) and translations (C,3),
    points (P,3), per-observation camera/point indices and measured pixels.

    Returns (res (N,2), Jc (N,2,6), Jp (N,2,3), z (N,)) where Jc is the
    Jacobian w.r.t. a left-multiplicative pose update [dw, dt] and Jp w.r.t.
    the point. Observations with z <= 0 get zeroed Jacobians and residuals.
    """
    R = Rs[cam_idx]                       # (N,3,3)
    t = ts[cam_idx]                       # (N,3)
    X = pts[pt_idx]                       # (N,3)
    xc = np.einsum("nij,nj->ni", R, X) + t
    z = xc[:, 2].copy()
    ok = z > 1e-12
    zs = np.where(ok, z, 1.0)

    n = len(cam_idx)
    res = np.zeros((n, 2))
    res[:, 0] = fx * xc[:, 0] / zs + cx - uv[:, 0]
    res[:, 1] = fy * xc[:, 1] / zs + cy - uv[:, 1]

    A = np.zeros((n, 2, 3))
    A[:, 0, 0] = fx / zs
    A[:, 0, 2] = -fx * xc[:, 0] / zs ** 2
    A[:, 1, 1] = fy / zs
    A[:, 1, 2] = -fy * xc[:, 1] / zs ** 2

    v = xc - t                            # = R @ X
    skew = np.zeros((n, 3, 3))
    skew[:, 0, 1] = -v[:, 2]
    skew[:, 0, 2] = v[:, 1]
    skew[:, 1, 0] = v[:, 2]
    skew[:, 1, 2] = -v[:, 0]
    skew[:, 2, 0] = -v[:, 1]
    skew[:, 2, 1] = v[:, 0]

    Jc = np.empty((n, 2, 6))
    Jc[:, :, :3] = -np.einsum("nij,njk->nik", A, skew)
    Jc[:, :, 3:] = A
    Jp = np.einsum("nij,njk->nik", A, R)

    if not np.all(ok):
        bad = ~ok
        res[bad] = 0.0
        Jc[bad] = 0.0
        Jp[bad] = 0.0
    return res, Jc, Jp, z
