"""Projective geometry core: camera model, SE(3)/Sim(3) transforms,
triangulation, two-view and PnP solvers with RANSAC, Umeyama alignment.

Conventions used everywhere in this package:
  * poses map world coordinates to camera coordinates, x_cam = R @ x_world + t
  * rotations are stored as scalar-first unit quaternions
  * pixel origin is the top-left corner, u rightward, v downward
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DegenerateGeometry,
    DegeneratePointSet,
    NegativeDepth,
    NotEnoughInliers,
)

DEPTH_EPS = 1e-9


# ---------------------------------------------------------------------------
# quaternion helpers (scalar-first)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # fix the double-cover sign so serialized poses are reproducible
    if q[0] < 0:
        q = -q
    return q


def quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_to_rot(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R):
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array(
                [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2
            q = np.array(
                [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2
            q = np.array(
                [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
            )
    return quat_normalize(q)


def so3_exp_quat(w):
    """Quaternion of the rotation exp([w]_x) for a small axis-angle vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]]))
    axis = w / theta
    return np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis])


def rot_about_axis(axis, angle):
    return quat_to_rot(so3_exp_quat(np.asarray(axis, dtype=float) * angle))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def as_matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def normalize(self, uv):
        """Pixel coordinates -> normalized image plane coordinates."""
        uv = np.asarray(uv, dtype=float)
        return (uv - [self.cx, self.cy]) / [self.fx, self.fy]

    def denormalize(self, xy):
        xy = np.asarray(xy, dtype=float)
        return xy * [self.fx, self.fy] + [self.cx, self.cy]

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class PoseSE3:
    """World-to-camera rigid transform, x_cam = R @ x_world + t."""

    q: np.ndarray  # scalar-first unit quaternion
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t):
        return cls(rot_to_quat(R), t)

    @property
    def R(self):
        return quat_to_rot(self.q)

    def apply(self, pts):
        """Transform world points (..., 3) into camera coordinates."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.t

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self ∘ other: first apply `other`, then `self`."""
        return PoseSE3(quat_mul(self.q, other.q), self.R @ other.t + self.t)

    def inverse(self) -> "PoseSE3":
        Rt = self.R.T
        return PoseSE3.from_rt(Rt, -Rt @ self.t)

    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def perturbed(self, dw, dt) -> "PoseSE3":
        """Left-multiplicative update: R <- exp([dw]_x) R, t <- t + dt."""
        return PoseSE3(quat_mul(so3_exp_quat(dw), self.q), self.t + np.asarray(dt))

    def to_dict(self):
        return {"q": self.q.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["q"]), np.array(d["t"]))


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform mapping source into target frame: y = s * R @ x + t."""

    scale: float
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(1.0, np.array([1.0, 0, 0, 0]), np.zeros(3))

    @property
    def R(self):
        return quat_to_rot(self.q)

    def apply(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.scale * (pts @ self.R.T) + self.t

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        return Sim3Transform(
            self.scale * other.scale,
            quat_mul(self.q, other.q),
            self.scale * (self.R @ other.t) + self.t,
        )

    def inverse(self) -> "Sim3Transform":
        Rt = self.R.T
        return Sim3Transform(1.0 / self.scale, rot_to_quat(Rt), -(Rt @ self.t) / self.scale)

    def map_pose(self, pose: PoseSE3) -> PoseSE3:
        """World-to-camera pose for cameras of the source model, expressed in
        the target frame.

        With y = s R x + t, a source camera (Rc, tc) becomes
        (Rc R^T, s tc - Rc R^T t): camera coordinates of mapped points come out
        scaled by s, which leaves pinhole projections unchanged.
        """
        Rc = pose.R
        Rn = Rc @ self.R.T
        tn = self.scale * pose.t - Rn @ self.t
        return PoseSE3.from_rt(Rn, tn)

    def to_dict(self):
        return {"scale": self.scale, "q": self.q.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scale"], np.array(d["q"]), np.array(d["t"]))


@dataclass
class RansacConfig:
    max_iters: int = 2000
    confidence: float = 0.999
    seed: int = 0
    essential_px_thresh: float = 2.0
    pnp_px_thresh: float = 4.0
    min_inliers: int = 15


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project(p, pose: PoseSE3, k: CameraIntrinsics):
    """Pinhole projection of one world point; None when the point lies at or
    behind the camera plane (depth <= DEPTH_EPS)."""
    xc = pose.apply(np.asarray(p, dtype=float))
    if xc[2] <= DEPTH_EPS:
        return None
    return np.array([k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy])


def project_many(pts, pose: PoseSE3, k: CameraIntrinsics):
    """Vectorized projection. Returns (uv (N,2), depth (N,)); entries with
    depth <= DEPTH_EPS carry NaN pixels."""
    xc = pose.apply(np.asarray(pts, dtype=float).reshape(-1, 3))
    z = xc[:, 2]
    ok = z > DEPTH_EPS
    uv = np.full((len(xc), 2), np.nan)
    uv[ok, 0] = k.fx * xc[ok, 0] / z[ok] + k.cx
    uv[ok, 1] = k.fy * xc[ok, 1] / z[ok] + k.cy
    return uv, z


def backproject(uv, depth, pose: PoseSE3, k: CameraIntrinsics):
    """World point at the given camera depth along the pixel ray."""
    xy = k.normalize(uv)
    xc = np.array([xy[0] * depth, xy[1] * depth, depth])
    return pose.R.T @ (xc - pose.t)


# ---------------------------------------------------------------------------
# triangulation
# ---------------------------------------------------------------------------

def triangulate_dlt(observations, min_tri_angle_deg=1.5, min_pos_depth_frac=1.0):
    """Homogeneous DLT triangulation from >= 2 (pose, intrinsics, pixel)
    observations.

    Raises DegenerateGeometry when the maximum pairwise ray angle is below
    `min_tri_angle_deg`, NegativeDepth when fewer than `min_pos_depth_frac`
    of the views see the point in front of the camera.
    """
    if len(observations) < 2:
        raise ValueError("need at least two observations")
    rows = []
    for pose, k, uv in observations:
        x, y = k.normalize(uv)
        P = np.hstack([pose.R, pose.t.reshape(3, 1)])
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    A = np.asarray(rows)
    _, _, vt = np.linalg.svd(A)
    Xh = vt[-1]
    if abs(Xh[3]) < 1e-14:
        raise DegenerateGeometry("point at infinity")
    X = Xh[:3] / Xh[3]

    centers = np.array([pose.center() for pose, _, _ in observations])
    rays = X - centers
    norms = np.linalg.norm(rays, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateGeometry("camera center coincides with the point")
    rays = rays / norms[:, None]
    max_angle = 0.0
    for i in range(len(rays)):
        cosang = np.clip(rays[i + 1:] @ rays[i], -1.0, 1.0)
        if len(cosang):
            max_angle = max(max_angle, float(np.degrees(np.max(np.arccos(cosang)))))
    if max_angle < min_tri_angle_deg:
        raise DegenerateGeometry(f"max triangulation angle {max_angle:.3f} deg")

    depths = np.array([pose.apply(X)[2] for pose, _, _ in observations])
    if np.mean(depths > DEPTH_EPS) < min_pos_depth_frac:
        raise NegativeDepth("cheirality check failed")
    return X


def triangulation_angles(X, poses):
    """Pairwise ray angles (degrees) from camera centers to a point."""
    centers = np.array([p.center() for p in poses])
    rays = X - centers
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    out = []
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            out.append(np.degrees(np.arccos(np.clip(rays[i] @ rays[j], -1, 1))))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# two-view relative pose (normalized 8-point + RANSAC)
# ---------------------------------------------------------------------------

def _eight_point(xa, xb):
    """Essential matrix from >= 8 normalized correspondences (b^T E a = 0)."""
    pts = np.hstack([xa, xb])
    mean = pts.mean(axis=0)
    scale = pts.std() + 1e-12
    na = (xa - mean[:2]) / scale
    nb = (xb - mean[2:]) / scale
    A = np.column_stack(
        [
            nb[:, 0] * na[:, 0], nb[:, 0] * na[:, 1], nb[:, 0],
            nb[:, 1] * na[:, 0], nb[:, 1] * na[:, 1], nb[:, 1],
            na[:, 0], na[:, 1], np.ones(len(na)),
        ]
    )
    _, _, vt = np.linalg.svd(A)
    F = vt[-1].reshape(3, 3)
    Ta = np.array([[1 / scale, 0, -mean[0] / scale], [0, 1 / scale, -mean[1] / scale], [0, 0, 1]])
    Tb = np.array([[1 / scale, 0, -mean[2] / scale], [0, 1 / scale, -mean[3] / scale], [0, 0, 1]])
    E = Tb.T @ F @ Ta
    # enforce the essential-matrix singular value structure
    u, s, vt = np.linalg.svd(E)
    s_avg = (s[0] + s[1]) / 2
    return u @ np.diag([s_avg, s_avg, 0.0]) @ vt


def _eight_point_batch(xa_s, xb_s):
    """Stacked 8-point solver: (m,8,2)+(m,8,2) samples -> (m,3,3) essential
    candidates, with per-sample Hartley normalization."""
    m = xa_s.shape[0]
    pts = np.concatenate([xa_s, xb_s], axis=2)              # (m,8,4)
    mean = pts.mean(axis=1)                                  # (m,4)
    scale = pts.std(axis=(1, 2)) + 1e-12                     # (m,)
    na = (xa_s - mean[:, None, :2]) / scale[:, None, None]
    nb = (xb_s - mean[:, None, 2:]) / scale[:, None, None]
    A = np.stack(
        [
            nb[:, :, 0] * na[:, :, 0], nb[:, :, 0] * na[:, :, 1], nb[:, :, 0],
            nb[:, :, 1] * na[:, :, 0], nb[:, :, 1] * na[:, :, 1], nb[:, :, 1],
            na[:, :, 0], na[:, :, 1], np.ones((m, 8)),
        ],
        axis=2,
    )
    _, _, vt = np.linalg.svd(A)
    F = vt[:, -1].reshape(m, 3, 3)
    # denormalize: E = Tb^T F Ta with Ta/Tb the per-sample normalizers
    Ta = np.zeros((m, 3, 3))
    Tb = np.zeros((m, 3, 3))
    inv_s = 1.0 / scale
    Ta[:, 0, 0] = Ta[:, 1, 1] = inv_s
    Ta[:, 0, 2] = -mean[:, 0] * inv_s
    Ta[:, 1, 2] = -mean[:, 1] * inv_s
    Ta[:, 2, 2] = 1.0
    Tb[:, 0, 0] = Tb[:, 1, 1] = inv_s
    Tb[:, 0, 2] = -mean[:, 2] * inv_s
    Tb[:, 1, 2] = -mean[:, 3] * inv_s
    Tb[:, 2, 2] = 1.0
    E = np.einsum("mji,mjk,mkl->mil", Tb, F, Ta)
    u, s, vt = np.linalg.svd(E)
    s_avg = 0.5 * (s[:, 0] + s[:, 1])
    D = np.zeros((m, 3, 3))
    D[:, 0, 0] = D[:, 1, 1] = s_avg
    return u @ D @ vt


def _sampson_sq_batch(Es, ah, bh):
    """Squared Sampson distances of all matches under (m,3,3) candidates."""
    Ea = np.einsum("mij,nj->mni", Es, ah)
    Etb = np.einsum("mji,nj->mni", Es, bh)
    num = np.einsum("ni,mni->mn", bh, Ea) ** 2
    den = Ea[:, :, 0] ** 2 + Ea[:, :, 1] ** 2 + Etb[:, :, 0] ** 2 + Etb[:, :, 1] ** 2
    return num / np.maximum(den, 1e-30)


def _sampson_sq(E, xa, xb):
    """Squared Sampson distance in normalized coordinates."""
    ah = np.column_stack([xa, np.ones(len(xa))])
    bh = np.column_stack([xb, np.ones(len(xb))])
    Ea = ah @ E.T          # E @ a
    Etb = bh @ E           # E^T @ b
    num = np.einsum("ij,ij->i", bh, Ea) ** 2
    den = Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2
    return num / np.maximum(den, 1e-30)


def _decompose_essential(E, xa, xb):
    """Pick the (R, t) among the four decompositions with the best cheirality
    vote; returns (pose, positive-depth mask)."""
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    t = u[:, 2]
    best = None
    for R in (u @ W @ vt, u @ W.T @ vt):
        for tt in (t, -t):
            mask, votes = _cheirality(R, tt, xa, xb)
            if best is None or votes > best[2]:
                best = (R, tt, votes, mask)
    R, tt, _, mask = best
    tt = tt / np.linalg.norm(tt)
    return PoseSE3.from_rt(R, tt), mask


def _cheirality(R, t, xa, xb):
    """Vectorized two-ray depth test with cameras [I|0] and [R|t].

    Solves the midpoint least-squares depths s1, s2 along both rays; a match
    passes when both are positive.
    """
    d1 = np.column_stack([xa, np.ones(len(xa))])
    d2 = np.column_stack([xb, np.ones(len(xb))]) @ R  # rays in world frame
    c2 = -R.T @ t
    a11 = np.einsum("ij,ij->i", d1, d1)
    a12 = -np.einsum("ij,ij->i", d1, d2)
    a22 = np.einsum("ij,ij->i", d2, d2)
    b1 = d1 @ c2
    b2 = -(d2 @ c2)
    det = a11 * a22 - a12 * a12
    det = np.where(np.abs(det) < 1e-30, 1e-30, det)
    s1 = (a22 * b1 - a12 * b2) / det
    s2 = (a11 * b2 - a12 * b1) / det
    ok = (s1 > 0) & (s2 > 0)
    return ok, int(ok.sum())


def _essential_from_pose(pose: PoseSE3):
    t = pose.t
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0.0]])
    return tx @ pose.R


def _refine_relative_pose(pose: PoseSE3, xa, xb, iters=15):
    """LM refinement of (R, t) on signed first-order geometric (Sampson)
    residuals; t keeps unit norm. Numeric Jacobian: the problem is tiny."""
    ah = np.column_stack([xa, np.ones(len(xa))])
    bh = np.column_stack([xb, np.ones(len(xb))])

    def residuals(p):
        E = _essential_from_pose(p)
        Ea = ah @ E.T
        Etb = bh @ E
        num = np.einsum("ij,ij->i", bh, Ea)
        den = np.sqrt(np.maximum(
            Ea[:, 0] ** 2 + Ea[:, 1] ** 2 + Etb[:, 0] ** 2 + Etb[:, 1] ** 2, 1e-30))
        return num / den

    def perturb(p, d):
        t = p.t + d[3:]
        n = np.linalg.norm(t)
        return PoseSE3(quat_mul(so3_exp_quat(d[:3]), p.q), t / max(n, 1e-12))

    r = residuals(pose)
    cost = r @ r
    lam = 1e-6
    h = 1e-7
    for _ in range(iters):
        J = np.empty((len(r), 6))
        for a in range(6):
            d = np.zeros(6)
            d[a] = h
            J[:, a] = (residuals(perturb(pose, d)) - r) / h
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(H + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = perturb(pose, delta)
            rc = residuals(cand)
            if rc @ rc < cost:
                pose, r, cost = cand, rc, rc @ rc
                lam = max(lam * 0.1, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved:
            break
    return pose


def estimate_relative_pose(matches_a, matches_b, ka: CameraIntrinsics, kb: CameraIntrinsics,
                           ransac: RansacConfig | None = None, rng=None):
    """Relative pose of camera b w.r.t. camera a (translation up to scale)
    from pixel correspondences, via 8-point essential RANSAC.

    Returns (PoseSE3 with unit-norm translation, inlier mask).
    """
    ransac = ransac or RansacConfig()
    xa = ka.normalize(np.asarray(matches_a, dtype=float).reshape(-1, 2))
    xb = kb.normalize(np.asarray(matches_b, dtype=float).reshape(-1, 2))
    n = len(xa)
    if n < 8:
        raise NotEnoughInliers(f"need >= 8 matches, got {n}")
    if rng is None:
        rng = np.random.default_rng(ransac.seed)

    # Sampson threshold in normalized coordinates
    thresh = (ransac.essential_px_thresh / ((ka.fx + ka.fy) / 2)) ** 2

    ah = np.column_stack([xa, np.ones(n)])
    bh = np.column_stack([xb, np.ones(n)])
    best_mask = None
    best_count = 0
    iters_needed = ransac.max_iters
    it = 0
    batch = 64
    while it < min(iters_needed, ransac.max_iters):
        m = min(batch, ransac.max_iters - it)
        idx = np.argsort(rng.random((m, n)), axis=1)[:, :8]
        Es = _eight_point_batch(xa[idx], xb[idx])
        masks = _sampson_sq_batch(Es, ah, bh) < thresh
        counts = masks.sum(axis=1)
        s = int(np.argmax(counts))
        if counts[s] > best_count:
            best_count, best_mask = int(counts[s]), masks[s]
            w = max(best_count / n, 1e-9)
            denom = np.log(max(1 - w ** 8, 1e-12))
            iters_needed = int(np.ceil(np.log(1 - ransac.confidence) / denom)) if denom < 0 else 0
        it += m

    if best_mask is None or best_count < max(8, ransac.min_inliers):
        raise NotEnoughInliers(f"{best_count} inliers < {ransac.min_inliers}")

    # refit on the consensus set and recompute inliers
    E = _eight_point(xa[best_mask], xb[best_mask])
    mask = _sampson_sq(E, xa, xb) < thresh
    if mask.sum() >= 8:
        best_mask = mask
        E = _eight_point(xa[best_mask], xb[best_mask])
    pose, che = _decompose_essential(E, xa[best_mask], xb[best_mask])
    final = best_mask.copy()
    final[np.flatnonzero(best_mask)[~che]] = False
    if final.sum() < ransac.min_inliers:
        raise NotEnoughInliers(f"{int(final.sum())} inliers < {ransac.min_inliers}")
    # geometric refinement; essential estimation alone is inaccurate on
    # low-relief (near-planar) scenes
    pose = _refine_relative_pose(pose, xa[final], xb[final])
    mask = _sampson_sq(_essential_from_pose(pose), xa, xb) < thresh
    che_ok, _ = _cheirality(pose.R, pose.t, xa, xb)
    mask &= che_ok
    if mask.sum() >= ransac.min_inliers:
        final = mask
    return pose, final


def relative_pose_triangulation_angle(pose: PoseSE3, pixels_a, pixels_b,
                                      ka: CameraIntrinsics, kb: CameraIntrinsics):
    """Median triangulation angle (degrees) of matches under a relative pose
    with cameras [I|0] and pose; used for seed-pair scoring."""
    xa = ka.normalize(np.asarray(pixels_a, dtype=float).reshape(-1, 2))
    xb = kb.normalize(np.asarray(pixels_b, dtype=float).reshape(-1, 2))
    R, t = pose.R, pose.t
    d1 = np.column_stack([xa, np.ones(len(xa))])
    d2 = np.column_stack([xb, np.ones(len(xb))]) @ R
    c2 = -R.T @ t
    a11 = np.einsum("ij,ij->i", d1, d1)
    a12 = -np.einsum("ij,ij->i", d1, d2)
    a22 = np.einsum("ij,ij->i", d2, d2)
    b1 = d1 @ c2
    b2 = -(d2 @ c2)
    det = a11 * a22 - a12 * a12
    det = np.where(np.abs(det) < 1e-30, 1e-30, det)
    s1 = (a22 * b1 - a12 * b2) / det
    s2 = (a11 * b2 - a12 * b1) / det
    ok = (s1 > 0) & (s2 > 0)
    if not np.any(ok):
        return 0.0
    X = s1[ok, None] * d1[ok]
    r1 = X / np.linalg.norm(X, axis=1, keepdims=True)
    r2 = X - c2
    r2 = r2 / np.linalg.norm(r2, axis=1, keepdims=True)
    cosang = np.clip(np.einsum("ij,ij->i", r1, r2), -1.0, 1.0)
    return float(np.median(np.degrees(np.arccos(cosang))))


# ---------------------------------------------------------------------------
# PnP (DLT + RANSAC + LM refinement)
# ---------------------------------------------------------------------------

def _pnp_dlt(X, xn):
    """[R|t] from >= 6 world points and normalized image points."""
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:3] = X
    A[0::2, 3] = 1
    A[0::2, 8:11] = -xn[:, 0:1] * X
    A[0::2, 11] = -xn[:, 0]
    A[1::2, 4:7] = X
    A[1::2, 7] = 1
    A[1::2, 8:11] = -xn[:, 1:2] * X
    A[1::2, 11] = -xn[:, 1]
    _, s, vt = np.linalg.svd(A)
    if s[0] / max(s[-2], 1e-300) > 1e12:
        raise DegenerateConfiguration("ill-conditioned PnP system")
    P = vt[-1].reshape(3, 4)
    # the homogeneous solution is sign-ambiguous; a valid camera matrix has
    # det(M) > 0, which also resolves cheirality
    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    u, sv, vvt = np.linalg.svd(P[:, :3])
    R = u @ vvt
    if np.linalg.det(R) < 0:
        raise DegenerateConfiguration("reflection in PnP DLT")
    t = P[:, 3] / sv.mean()
    return PoseSE3.from_rt(R, t)


def _pnp_planar(X, xn):
    """Pose from >= 4 near-coplanar points via plane-to-image homography
    decomposition; the 12-parameter DLT is degenerate in this configuration."""
    X = np.asarray(X, dtype=float)
    c = X.mean(axis=0)
    Xc = X - c
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    E = vt.T  # columns: two in-plane axes, then the normal
    if np.linalg.det(E) < 0:
        E[:, 2] = -E[:, 2]
    w = Xc @ E[:, :2]
    # DLT homography from plane coordinates to normalized image coordinates
    n = len(X)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = w
    A[0::2, 2] = 1
    A[0::2, 6:8] = -xn[:, 0:1] * w
    A[0::2, 8] = -xn[:, 0]
    A[1::2, 3:5] = w
    A[1::2, 5] = 1
    A[1::2, 6:8] = -xn[:, 1:2] * w
    A[1::2, 8] = -xn[:, 1]
    _, sv, vth = np.linalg.svd(A)
    if sv[0] / max(sv[-2], 1e-300) > 1e12:
        raise DegenerateConfiguration("ill-conditioned planar PnP system")
    H = vth[-1].reshape(3, 3)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    r1, r2, t = lam * h1, lam * h2, lam * h3
    Rp = np.column_stack([r1, r2, np.cross(r1, r2)])
    u, _, vtr = np.linalg.svd(Rp)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vtr))])
    Rp = u @ D @ vtr
    # the homography sign is ambiguous; points must come out in front
    if np.median(w @ Rp[2, :2] + t[2]) < 0:
        Rp = np.column_stack([-Rp[:, 0], -Rp[:, 1], Rp[:, 2]])
        t = -t
    R = Rp @ np.column_stack([E[:, 0], E[:, 1], E[:, 2]]).T
    return PoseSE3.from_rt(R, t - R @ c)


def _pnp_minimal(X, xn):
    """Minimal-sample pose: planar solver for flat samples, DLT otherwise."""
    Xc = X - X.mean(axis=0)
    s = np.linalg.svd(Xc, compute_uv=False)
    if s[2] < 0.08 * max(s[0], 1e-300):
        return _pnp_planar(X, xn)
    return _pnp_dlt(X, xn)


def _pnp_refine(pose, X, uv, k, iters=20):
    """Levenberg-Marquardt refinement of a single pose on inliers."""
    lam = 1e-3
    X = np.asarray(X, dtype=float)
    uv = np.asarray(uv, dtype=float)

    def residuals(p):
        xc = p.apply(X)
        z = np.maximum(xc[:, 2], 1e-12)
        pred = np.column_stack([k.fx * xc[:, 0] / z + k.cx, k.fy * xc[:, 1] / z + k.cy])
        return (pred - uv).ravel(), xc

    r, xc = residuals(pose)
    cost = r @ r
    for _ in range(iters):
        z = np.maximum(xc[:, 2], 1e-12)
        # d(uv)/d(xc)
        A = np.zeros((len(X), 2, 3))
        A[:, 0, 0] = k.fx / z
        A[:, 0, 2] = -k.fx * xc[:, 0] / z ** 2
        A[:, 1, 1] = k.fy / z
        A[:, 1, 2] = -k.fy * xc[:, 1] / z ** 2
        # d(xc)/d(w) = -[xc - t]_x ; d(xc)/d(t) = I
        v = xc - pose.t
        skew = np.zeros((len(X), 3, 3))
        skew[:, 0, 1] = -v[:, 2]
        skew[:, 0, 2] = v[:, 1]
        skew[:, 1, 0] = v[:, 2]
        skew[:, 1, 2] = -v[:, 0]
        skew[:, 2, 0] = -v[:, 1]
        skew[:, 2, 1] = v[:, 0]
        J = np.concatenate([-np.einsum("nij,njk->nik", A, skew), A], axis=2).reshape(-1, 6)
        g = J.T @ r
        H = J.T @ J
        improved = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-15 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = pose.perturbed(delta[:3], delta[3:])
            rc, xcc = residuals(cand)
            if rc @ rc < cost:
                pose, r, xc, cost = cand, rc, xcc, rc @ rc
                lam = max(lam * 0.1, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or cost < 1e-24:
            break
    return pose


def solve_pnp(world_points, pixels, k: CameraIntrinsics, ransac: RansacConfig | None = None,
              rng=None):
    """Camera pose from 2D-3D correspondences: DLT inside RANSAC followed by
    LM refinement on the consensus set. Returns (PoseSE3, inlier mask)."""
    ransac = ransac or RansacConfig()
    X = np.asarray(world_points, dtype=float).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < 6:
        raise NotEnoughInliers(f"need >= 6 correspondences, got {n}")
    if rng is None:
        rng = np.random.default_rng(ransac.seed)
    xn = k.normalize(uv)

    best_mask, best_count, best_pose = None, 0, None
    iters_needed = ransac.max_iters
    it = 0
    while it < min(iters_needed, ransac.max_iters):
        idx = rng.choice(n, size=6, replace=False)
        it += 1
        try:
            pose = _pnp_minimal(X[idx], xn[idx])
        except DegenerateConfiguration:
            continue
        pred, z = project_many(X, pose, k)
        err = np.linalg.norm(np.nan_to_num(pred, nan=1e9) - uv, axis=1)
        mask = (err < ransac.pnp_px_thresh) & (z > DEPTH_EPS)
        cnt = int(mask.sum())
        if cnt > best_count:
            best_count, best_mask, best_pose = cnt, mask, pose
            w = max(cnt / n, 1e-9)
            denom = np.log(max(1 - w ** 6, 1e-12))
            iters_needed = int(np.ceil(np.log(1 - ransac.confidence) / denom)) if denom < 0 else 0

    if best_mask is None or best_count < 6:
        raise NotEnoughInliers(f"{best_count} PnP inliers < 6")

    pose = _pnp_refine(best_pose, X[best_mask], uv[best_mask], k)
    pred, z = project_many(X, pose, k)
    err = np.linalg.norm(np.nan_to_num(pred, nan=1e9) - uv, axis=1)
    mask = (err < ransac.pnp_px_thresh) & (z > DEPTH_EPS)
    if mask.sum() < 6:
        raise NotEnoughInliers(f"{int(mask.sum())} PnP inliers < 6 after refinement")
    return pose, mask


# ---------------------------------------------------------------------------
# Umeyama alignment
# ---------------------------------------------------------------------------

def umeyama_align(src, dst, with_scale=True) -> Sim3Transform:
    """Least-squares similarity (or rigid) transform minimizing
    sum ||dst_i - (s R src_i + t)||^2."""
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("point lists must have equal length")
    if len(src) < 3:
        raise DegeneratePointSet("need >= 3 points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    cov = cd.T @ cs / len(src)
    u, s, vt = np.linalg.svd(cov)
    rank = int(np.sum(s > max(s[0], 1e-300) * 1e-12))
    if rank < 2:
        raise DegeneratePointSet("centered source rank < 2")
    S = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        S[2, 2] = -1
    R = u @ S @ vt
    var_s = (cs ** 2).sum() / len(src)
    scale = float(np.trace(np.diag(s) @ S) / var_s) if with_scale else 1.0
    if scale <= 0:
        raise DegeneratePointSet("non-positive scale estimate")
    t = mu_d - scale * R @ mu_s
    return Sim3Transform(scale, rot_to_quat(R), t)
