"""Sparse bundle adjustment: Levenberg-Marquardt with analytic Jacobians,
Huber robust loss and Schur-complement elimination of the points.

Gauge handling: the first registered camera stays constant and the seed-pair
baseline length is restored after every accepted step (a pure similarity
rescaling, which leaves all reprojection residuals unchanged).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..errors import NumericalFailure
from ..geometry import PoseSE3, project_many
from .._kernels import reproj_residual_jacobian
from .reconstruction import REJECTED, Reconstruction, TRIANGULATED, UNTRIANGULATED


@dataclass
class BundleConfig:
    huber_delta: float = 2.0          # pixels
    lm_lambda_init: float = 1e-3
    lm_up: float = 10.0
    lm_down: float = 0.1
    lm_lambda_max: float = 1e12
    max_iterations: int = 30
    rel_tol: float = 1e-8
    refine_intrinsics: bool = False
    prune_threshold_px: float = 4.0

    def __post_init__(self):
        if self.lm_lambda_init <= 0:
            raise ValueError("damping must be positive")
        if self.huber_delta <= 0:
            raise ValueError("huber delta must be positive")


def huber_cost(err_norms, delta):
    e = np.asarray(err_norms, dtype=float)
    quad = e <= delta
    return float(np.sum(0.5 * e[quad] ** 2) + np.sum(delta * (e[~quad] - 0.5 * delta)))


def _gather_problem(recon: Reconstruction, free_images=None):
    """Flatten the reconstruction into BA arrays.

    free_images: images whose poses are optimized (default: all registered but
    the gauge camera). Points entering the problem are those triangulated
    tracks observed by at least one free image; observations from fixed
    cameras still constrain them.
    """
    cam_ids = recon.registered_images()
    cam_index = {c: i for i, c in enumerate(cam_ids)}
    fixed = {recon.gauge.get("fixed_image")}
    if free_images is None:
        free = [c for c in cam_ids if c not in fixed]
    else:
        free = [c for c in sorted(free_images) if c in cam_index and c not in fixed]
    free_set = set(free)

    track_ids = []
    for tid, t in sorted(recon.tracks.items()):
        if t.state != TRIANGULATED:
            continue
        imgs = [i for i, _ in t.obs if i in cam_index]
        if len(imgs) < 2:
            continue
        if free_images is not None and not any(i in free_set for i in imgs):
            continue
        track_ids.append(tid)
    pt_index = {tid: i for i, tid in enumerate(track_ids)}

    cam_idx, pt_idx, uv = [], [], []
    for tid in track_ids:
        t = recon.tracks[tid]
        for j, (iid, _) in enumerate(t.obs):
            ci = cam_index.get(iid)
            if ci is None:
                continue
            cam_idx.append(ci)
            pt_idx.append(pt_index[tid])
            uv.append(t.uv[j])
    return {
        "cam_ids": cam_ids,
        "cam_index": cam_index,
        "free": free,
        "track_ids": track_ids,
        "cam_idx": np.asarray(cam_idx, dtype=np.int64),
        "pt_idx": np.asarray(pt_idx, dtype=np.int64),
        "uv": np.asarray(uv, dtype=float).reshape(-1, 2),
    }


def _pose_arrays(recon, cam_ids):
    Rs = np.array([recon.poses[c].R for c in cam_ids])
    ts = np.array([recon.poses[c].t for c in cam_ids])
    return np.ascontiguousarray(Rs), np.ascontiguousarray(ts)


def _evaluate(Rs, ts, pts, prob, k, delta):
    res, Jc, Jp, z = reproj_residual_jacobian(
        Rs, ts, pts, prob["cam_idx"], prob["pt_idx"], prob["uv"],
        k.fx, k.fy, k.cx, k.cy)
    e = np.linalg.norm(res, axis=1)
    behind = z <= 1e-12
    # points behind a camera contribute a fixed large penalty so the robust
    # cost still reflects them, but no gradient (kernel zeroes those rows)
    cost = huber_cost(e[~behind], delta) + 1e4 * int(behind.sum())
    return res, Jc, Jp, e, cost, behind


def _apply_gauge_scale(recon: Reconstruction):
    """Rescale the model so the seed baseline keeps its stored length."""
    seed = recon.gauge.get("seed_pair")
    target = recon.gauge.get("baseline", 1.0)
    if not seed:
        return
    a, b = seed
    if a not in recon.poses or b not in recon.poses:
        return
    cur = float(np.linalg.norm(recon.poses[a].center() - recon.poses[b].center()))
    if cur < 1e-12:
        return
    s = target / cur
    if abs(s - 1.0) < 1e-15:
        return
    for iid, p in recon.poses.items():
        recon.poses[iid] = PoseSE3(p.q, p.t * s)
    for t in recon.tracks.values():
        if t.point is not None:
            t.point = t.point * s


def bundle_adjust(recon: Reconstruction, cfg: BundleConfig, free_images=None):
    """In-place LM bundle adjustment. Returns a trace dict with the robust
    cost after each accepted step (monotone non-increasing), iteration and
    acceptance counts."""
    prob = _gather_problem(recon, free_images)
    k = recon.intrinsics
    n_obs = len(prob["cam_idx"])
    trace = {"costs": [], "accepted_steps": 0, "iterations": 0, "n_obs": n_obs,
             "n_cams_free": len(prob["free"]), "n_points": len(prob["track_ids"])}
    if n_obs == 0 or not prob["track_ids"]:
        return trace

    cam_ids = prob["cam_ids"]
    free = prob["free"]
    free_pos = {c: i for i, c in enumerate(free)}
    C = len(cam_ids)
    F = len(free)
    P = len(prob["track_ids"])
    refine_k = bool(cfg.refine_intrinsics)
    nk = 4 if refine_k else 0

    # mask of observations whose camera is free
    free_cam_arr = np.array([cam_ids[i] in free_pos for i in range(C)])
    obs_free = free_cam_arr[prob["cam_idx"]]
    # map global camera index -> free index (or -1)
    cam_to_free = np.full(C, -1, dtype=np.int64)
    for c, i in free_pos.items():
        cam_to_free[prob["cam_index"][c]] = i
    obs_free_idx = cam_to_free[prob["cam_idx"]]

    pts = np.array([recon.tracks[tid].point for tid in prob["track_ids"]], dtype=float)
    Rs, ts = _pose_arrays(recon, cam_ids)
    fx, fy, cx, cy = k.fx, k.fy, k.cx, k.cy

    res, Jc, Jp, e, cost, behind = _evaluate(Rs, ts, pts, prob, k, cfg.huber_delta)
    trace["costs"].append(cost)

    # per-point observation grouping for the Schur assembly
    order = np.argsort(prob["pt_idx"], kind="stable")
    sorted_pt = prob["pt_idx"][order]
    seg_starts = np.searchsorted(sorted_pt, np.arange(P))
    seg_ends = np.searchsorted(sorted_pt, np.arange(P), side="right")
    groups = [order[seg_starts[p]:seg_ends[p]] for p in range(P)]
    pair_i = np.concatenate([np.repeat(g, len(g)) for g in groups])
    pair_j = np.concatenate([np.tile(g, len(g)) for g in groups])
    # keep only pairs whose row camera is free (columns handled symmetrically)
    pair_keep = obs_free[pair_i] & obs_free[pair_j]
    pair_i_f = pair_i[pair_keep]
    pair_j_f = pair_j[pair_keep]

    lam = cfg.lm_lambda_init
    it = 0
    while it < cfg.max_iterations:
        it += 1
        trace["iterations"] = it

        # robust (IRLS) weights: sqrt of rho'(e)/e
        w = np.ones(n_obs)
        big = e > cfg.huber_delta
        w[big] = cfg.huber_delta / e[big]
        w[behind] = 0.0
        sw = np.sqrt(w)[:, None, None]
        rw = res * np.sqrt(w)[:, None]
        Jcw = Jc * sw
        Jpw = Jp * sw
        Jcw[~obs_free] = 0.0

        if refine_k:
            # d(res)/d(fx,fy,cx,cy); reconstruct xc/z from the prediction
            upred = res + prob["uv"]
            Jk = np.zeros((n_obs, 2, 4))
            Jk[:, 0, 0] = (upred[:, 0] - cx) / fx
            Jk[:, 0, 2] = 1.0
            Jk[:, 1, 1] = (upred[:, 1] - cy) / fy
            Jk[:, 1, 3] = 1.0
            Jkw = Jk * sw

        # blocks
        Hcc = np.zeros((F, 6, 6))
        gc = np.zeros((F, 6))
        np.add.at(Hcc, obs_free_idx[obs_free],
                  np.einsum("nia,nib->nab", Jcw[obs_free], Jcw[obs_free]))
        np.add.at(gc, obs_free_idx[obs_free],
                  np.einsum("nia,ni->na", Jcw[obs_free], rw[obs_free]))

        Hpp = np.zeros((P, 3, 3))
        gp = np.zeros((P, 3))
        np.add.at(Hpp, prob["pt_idx"], np.einsum("nia,nib->nab", Jpw, Jpw))
        np.add.at(gp, prob["pt_idx"], np.einsum("nia,ni->na", Jpw, rw))

        W = np.einsum("nia,nib->nab", Jcw, Jpw)  # (N,6,3); zero rows for fixed cams

        if refine_k:
            Hkk = np.einsum("nia,nib->ab", Jkw, Jkw)
            gk = np.einsum("nia,ni->a", Jkw, rw)
            Hck = np.zeros((F, 6, 4))
            np.add.at(Hck, obs_free_idx[obs_free],
                      np.einsum("nia,nib->nab", Jcw[obs_free], Jkw[obs_free]))
            Wk = np.zeros((P, 4, 3))  # per-point aggregated intrinsics-point block
            np.add.at(Wk, prob["pt_idx"], np.einsum("nia,nib->nab", Jkw, Jpw))

        accepted = False
        while lam <= cfg.lm_lambda_max:
            Hcc_d = Hcc.copy()
            dc = np.einsum("nii->ni", Hcc)
            Hcc_d[:, np.arange(6), np.arange(6)] += lam * np.maximum(dc, 1e-8)
            Hpp_d = Hpp.copy()
            dp = np.einsum("nii->ni", Hpp)
            Hpp_d[:, np.arange(3), np.arange(3)] += lam * np.maximum(dp, 1e-8)

            try:
                Hpp_inv = np.linalg.inv(Hpp_d)
            except np.linalg.LinAlgError:
                lam *= cfg.lm_up
                continue

            nfull = 6 * F + nk
            Y = np.einsum("nab,nbc->nac", W, Hpp_inv[prob["pt_idx"]])  # (N,6,3)

            S = np.zeros((F, 6, F, 6))
            idx = np.arange(F)
            S[idx, :, idx, :] = Hcc_d
            blocks = np.einsum("mab,mcb->mac", Y[pair_i_f], W[pair_j_f])
            np.add.at(S, (obs_free_idx[pair_i_f], slice(None), obs_free_idx[pair_j_f]),
                      -blocks)
            rhs = -gc.copy()
            np.add.at(rhs, obs_free_idx[obs_free],
                      np.einsum("nab,nb->na", Y[obs_free], gp[prob["pt_idx"]][obs_free]))

            Sfull = np.zeros((nfull, nfull))
            Sfull[: 6 * F, : 6 * F] = S.reshape(6 * F, 6 * F)
            rfull = np.zeros(nfull)
            rfull[: 6 * F] = rhs.reshape(-1)

            if refine_k:
                Hkk_d = Hkk.copy()
                Hkk_d[np.arange(4), np.arange(4)] += lam * np.maximum(np.diag(Hkk), 1e-8)
                WkHinv = np.einsum("pab,pbc->pac", Wk, Hpp_inv)         # (P,4,3)
                Skk = Hkk_d - np.einsum("pab,pcb->ac", WkHinv, Wk)
                # camera-intrinsics coupling: direct Hck minus Schur term
                Sck = Hck.copy()
                ck_blocks = np.einsum("nab,ncb->nac", Y, Wk[prob["pt_idx"]])  # (N,6,4)
                np.add.at(Sck, obs_free_idx[obs_free], -ck_blocks[obs_free])
                Sfull[: 6 * F, 6 * F:] = Sck.reshape(6 * F, 4)
                Sfull[6 * F:, : 6 * F] = Sck.reshape(6 * F, 4).T
                Sfull[6 * F:, 6 * F:] = Skk
                rfull[6 * F:] = -gk + np.einsum("pab,pb->a", WkHinv, gp)

            try:
                cf = cho_factor(Sfull)
                delta_c = cho_solve(cf, rfull)
            except np.linalg.LinAlgError:
                lam *= cfg.lm_up
                continue

            # back-substitute points: dp = Hpp^-1 (-gp - W^T dc [- Wk^T dk])
            rhs_p = -gp.copy()
            if F:
                dc_per_obs = delta_c[: 6 * F].reshape(F, 6)[obs_free_idx[obs_free]]
                np.add.at(rhs_p, prob["pt_idx"][obs_free],
                          -np.einsum("nab,na->nb", W[obs_free], dc_per_obs))
            if refine_k:
                dk = delta_c[6 * F:]
                rhs_p -= np.einsum("pab,pa->pb", Wk, np.broadcast_to(dk, (P, 4)))
            delta_p = np.einsum("pab,pb->pa", Hpp_inv, rhs_p)

            # tentative update
            new_Rs, new_ts = Rs.copy(), ts.copy()
            new_poses = {}
            for c, fi in free_pos.items():
                d = delta_c[6 * fi: 6 * fi + 6]
                p = recon.poses[c].perturbed(d[:3], d[3:])
                new_poses[c] = p
                gi = prob["cam_index"][c]
                new_Rs[gi] = p.R
                new_ts[gi] = p.t
            new_pts = pts + delta_p
            if refine_k:
                nfx, nfy, ncx, ncy = fx + dk[0], fy + dk[1], cx + dk[2], cy + dk[3]
            else:
                nfx, nfy, ncx, ncy = fx, fy, cx, cy

            nres, nJc, nJp, nz = reproj_residual_jacobian(
                new_Rs, new_ts, new_pts, prob["cam_idx"], prob["pt_idx"], prob["uv"],
                nfx, nfy, ncx, ncy)
            ne = np.linalg.norm(nres, axis=1)
            nbehind = nz <= 1e-12
            ncost = huber_cost(ne[~nbehind], cfg.huber_delta) + 1e4 * int(nbehind.sum())

            if ncost < cost:
                Rs, ts, pts = new_Rs, new_ts, new_pts
                res, Jc, Jp, e, behind = nres, nJc, nJp, ne, nbehind
                prev_cost, cost = cost, ncost
                fx, fy, cx, cy = nfx, nfy, ncx, ncy
                for c, p in new_poses.items():
                    recon.poses[c] = p
                trace["costs"].append(cost)
                trace["accepted_steps"] += 1
                lam = max(lam * cfg.lm_down, 1e-12)
                accepted = True
                break
            lam *= cfg.lm_up

        if not accepted:
            if lam > cfg.lm_lambda_max:
                if trace["accepted_steps"] == 0 and not np.isfinite(cost):
                    raise NumericalFailure("bundle adjustment could not recover by damping")
            break
        if (prev_cost - cost) < cfg.rel_tol * max(prev_cost, 1e-30):
            break

    # write back points and intrinsics, restore the gauge scale
    for i, tid in enumerate(prob["track_ids"]):
        recon.tracks[tid].point = pts[i]
    if refine_k:
        from ..geometry import CameraIntrinsics
        recon.intrinsics = CameraIntrinsics(fx, fy, cx, cy, k.width, k.height)
    _apply_gauge_scale(recon)
    return trace


def prune_observations(recon: Reconstruction, threshold_px=4.0):
    """Drop observations of triangulated tracks with reprojection error above
    the threshold; tracks left with < 2 registered observations fall back to
    untriangulated. Returns the number of removed observations."""
    removed = 0
    for t in list(recon.triangulated_tracks()):
        keep = []
        for j, (iid, _) in enumerate(t.obs):
            pose = recon.poses.get(iid)
            if pose is None:
                keep.append(j)
                continue
            uv, z = project_many(t.point, pose, recon.intrinsics)
            if z[0] > 0 and np.all(np.isfinite(uv[0])) and \
                    np.linalg.norm(uv[0] - t.uv[j]) <= threshold_px:
                keep.append(j)
        if len(keep) < len(t.obs):
            removed += len(t.obs) - len(keep)
            t.obs = [t.obs[j] for j in keep]
            t.uv = t.uv[keep] if keep else t.uv[:0]
            n_reg = sum(1 for i, _ in t.obs if i in recon.poses)
            if n_reg < 2:
                t.state = UNTRIANGULATED
                t.point = None
            if len(t.obs) < 2:
                t.state = REJECTED
    return removed
