"""Post-hoc alignment baseline: trimmed point-to-point ICP over Sim(3) and
merging of independently reconstructed sessions into a common frame."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import AlignmentFailed, DegeneratePointSet
from .geometry import Sim3Transform, rot_to_quat, umeyama_align
from .sfm.reconstruction import Reconstruction, Track

INIT_MODES = ("identity", "centroid", "pca")


@dataclass
class PointCloud:
    points: np.ndarray               # (N,3)
    ids: np.ndarray | None = None    # optional per-point labels

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


@dataclass
class IcpConfig:
    max_iterations: int = 100
    rel_tol: float = 1e-8
    trim_fraction: float = 0.3       # drop this fraction of worst associations
    with_scale: bool = True
    init: str = "centroid"
    pca_probe_iterations: int = 10   # short run per PCA sign hypothesis
    fail_above_mse: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.trim_fraction < 1.0):
            raise ValueError("trim_fraction must be in [0, 1)")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")


def _centroid_init(src, dst, with_scale):
    t = dst.mean(axis=0) - src.mean(axis=0)
    if with_scale:
        rs = np.sqrt(((src - src.mean(0)) ** 2).sum(1).mean())
        rd = np.sqrt(((dst - dst.mean(0)) ** 2).sum(1).mean())
        s = rd / max(rs, 1e-12)
        return Sim3Transform(s, np.array([1.0, 0, 0, 0]),
                             dst.mean(axis=0) - s * src.mean(axis=0))
    return Sim3Transform(1.0, np.array([1.0, 0, 0, 0]), t)


def _pca_inits(src, dst, with_scale):
    """Centroid + RMS-scale + principal-axes initializations.

    The axis correspondence is sign-ambiguous, so all four proper-rotation
    sign flips are returned as separate hypotheses.
    """
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cs, cd = src - mu_s, dst - mu_d
    rs = np.sqrt((cs ** 2).sum(1).mean())
    rd = np.sqrt((cd ** 2).sum(1).mean())
    s = rd / max(rs, 1e-12) if with_scale else 1.0
    _, _, vs = np.linalg.svd(cs, full_matrices=False)
    _, _, vd = np.linalg.svd(cd, full_matrices=False)
    inits = []
    for flips in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]):
        R = vd.T @ np.diag(flips) @ vs
        if np.linalg.det(R) < 0:
            R = vd.T @ np.diag([-f for f in flips]) @ vs
        inits.append(Sim3Transform(s, rot_to_quat(R), mu_d - s * R @ mu_s))
    return inits


def _trimmed_associate(moved, tree, dst, trim_fraction):
    d, j = tree.query(moved, k=1)
    n_keep = max(3, int(np.ceil(len(moved) * (1.0 - trim_fraction))))
    keep = np.argsort(d, kind="stable")[:n_keep]
    return keep, j[keep], float(np.mean(d[keep] ** 2))


def _icp_refine(src, dst, tree, T, cfg, max_iterations):
    """Alternate trimmed association and Umeyama refit; the trimmed MSE trace
    is monotone because a step that would increase it is rejected."""
    moved = T.apply(src)
    keep, j, mse = _trimmed_associate(moved, tree, dst, cfg.trim_fraction)
    trace = [mse]
    for _ in range(max_iterations):
        try:
            T_new = umeyama_align(src[keep], dst[j], with_scale=cfg.with_scale)
        except DegeneratePointSet:
            break
        moved = T_new.apply(src)
        keep_n, j_n, mse_n = _trimmed_associate(moved, tree, dst, cfg.trim_fraction)
        if mse_n >= mse:
            break
        T, keep, j, mse = T_new, keep_n, j_n, mse_n
        trace.append(mse)
        if len(trace) >= 2 and (trace[-2] - trace[-1]) < cfg.rel_tol * max(trace[-2], 1e-30):
            break
    return T, mse, trace


def icp_point_to_point(src_cloud: PointCloud, dst_cloud: PointCloud,
                       cfg: IcpConfig | None = None):
    """Trimmed Sim(3) (or SE(3)) ICP from src onto dst.

    Returns (Sim3Transform, info) where info carries the monotone trimmed-MSE
    trace, the final trimmed MSE and the chosen initialization.
    """
    cfg = cfg or IcpConfig()
    src = src_cloud.points
    dst = dst_cloud.points
    if len(src) < 3 or len(dst) < 3:
        raise DegeneratePointSet("need >= 3 points in both clouds")
    tree = cKDTree(dst)

    if cfg.init == "identity":
        inits = [Sim3Transform.identity()]
    elif cfg.init == "centroid":
        inits = [_centroid_init(src, dst, cfg.with_scale)]
    else:
        inits = _pca_inits(src, dst, cfg.with_scale)

    if len(inits) == 1:
        T0, chosen = inits[0], 0
    else:
        probes = [_icp_refine(src, dst, tree, T, cfg, cfg.pca_probe_iterations)
                  for T in inits]
        chosen = int(np.argmin([p[1] for p in probes]))
        T0 = probes[chosen][0]

    T, mse, trace = _icp_refine(src, dst, tree, T0, cfg, cfg.max_iterations)
    info = {"trimmed_mse": mse, "mse_trace": trace, "init": cfg.init,
            "init_hypothesis": chosen, "iterations": len(trace) - 1}
    return T, info


def align_posthoc(recons: dict, cfg: IcpConfig | None = None):
    """Merge independently reconstructed sessions by ICP onto the first one.

    `recons` maps session_id -> Reconstruction; the lowest session id is the
    reference frame. Returns (merged Reconstruction, session_id -> Sim3,
    session_id -> icp info). Raises AlignmentFailed when a session's final
    trimmed MSE exceeds cfg.fail_above_mse.
    """
    cfg = cfg or IcpConfig()
    if not recons:
        raise AlignmentFailed("no reconstructions to align")
    sessions = sorted(recons)
    ref = recons[sessions[0]]
    dst_pts, _, _ = ref.point_cloud()
    if len(dst_pts) < 3:
        raise AlignmentFailed("reference session has too few points")

    merged = Reconstruction(ref.intrinsics, {})
    transforms = {sessions[0]: Sim3Transform.identity()}
    infos = {sessions[0]: {"trimmed_mse": 0.0, "mse_trace": [0.0], "init": "reference",
                           "init_hypothesis": 0, "iterations": 0}}
    for s in sessions[1:]:
        src_pts, _, _ = recons[s].point_cloud()
        if len(src_pts) < 3:
            raise AlignmentFailed(f"session {s} has too few points")
        T, info = icp_point_to_point(PointCloud(src_pts), PointCloud(dst_pts), cfg)
        if cfg.fail_above_mse is not None and info["trimmed_mse"] > cfg.fail_above_mse:
            raise AlignmentFailed(
                f"session {s} trimmed MSE {info['trimmed_mse']:.6g} exceeds "
                f"{cfg.fail_above_mse:.6g}")
        transforms[s] = T
        infos[s] = info

    tid_next = 0
    for s in sessions:
        r = recons[s]
        T = transforms[s]
        merged.session_of.update(r.session_of)
        for iid, pose in r.poses.items():
            merged.poses[iid] = T.map_pose(pose)
        for _, t in sorted(r.tracks.items()):
            nt = Track(tid_next, list(t.obs), t.uv.copy(),
                       None if t.point is None else T.apply(t.point).reshape(3),
                       t.state)
            merged.tracks[tid_next] = nt
            tid_next += 1
        merged.log.append({"event": "aligned_session", "session_id": s,
                           "trimmed_mse": infos[s]["trimmed_mse"]})
    merged.gauge = dict(ref.gauge)
    return merged, transforms, infos
