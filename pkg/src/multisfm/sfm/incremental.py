"""Incremental structure-from-motion.

Pipeline: seed-pair initialization -> loop { register best next image by PnP,
triangulate newly constrained tracks, local bundle adjustment on a trailing
window, periodic global bundle adjustment } -> final global adjustment and
observation pruning. Joint reconstruction runs the loop over the images of
every session at once; the per-session baseline restricts the match graph to
same-session pairs first.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import (
    DegenerateConfiguration,
    DegenerateGeometry,
    NegativeDepth,
    NotEnoughInliers,
    NoViablePair,
)
from ..geometry import PoseSE3, RansacConfig, solve_pnp, triangulate_dlt
from ..matching import MatchGraph
from .bundle import BundleConfig, bundle_adjust, prune_observations
from .reconstruction import Reconstruction, TRIANGULATED, UNTRIANGULATED
from .tracks import build_tracks


@dataclass
class SfmConfig:
    min_seed_inliers: int = 50
    min_seed_angle_deg: float = 4.0
    min_pnp_observations: int = 6
    max_registration_retries: int = 2
    local_window: int = 5
    global_every: int = 20
    min_tri_angle_deg: float = 1.5
    local_ba_iters: int = 8
    global_ba_iters: int = 20
    final_ba_iters: int = 40
    ransac: RansacConfig = field(default_factory=RansacConfig)
    bundle: BundleConfig = field(default_factory=BundleConfig)
    seed: int = 0

    def __post_init__(self):
        if self.local_window < 1 or self.global_every < 1:
            raise ValueError("window sizes must be >= 1")


def select_seed_pair(graph: MatchGraph, image_ids, cfg: SfmConfig):
    """Admitted pair maximizing inliers x median triangulation angle, subject
    to floors on both; deterministic tie-break toward the smallest pair."""
    ids = set(image_ids)
    best = None
    for (a, b), pm in sorted(graph.pairs.items()):
        if a not in ids or b not in ids:
            continue
        if pm.n_inliers < cfg.min_seed_inliers:
            continue
        if pm.median_tri_angle_deg < cfg.min_seed_angle_deg:
            continue
        score = pm.n_inliers * pm.median_tri_angle_deg
        if best is None or score > best[0] + 1e-12:
            best = (score, a, b)
    if best is None:
        raise NoViablePair(
            f"no admitted pair with >= {cfg.min_seed_inliers} inliers and "
            f">= {cfg.min_seed_angle_deg} deg median triangulation angle")
    return best[1], best[2]


class IncrementalMapper:
    """Stateful driver of one incremental reconstruction."""

    def __init__(self, images, graph: MatchGraph, intrinsics, cfg: SfmConfig):
        self.images = sorted(images, key=lambda im: im.image_id)
        self.by_id = {im.image_id: im for im in self.images}
        self.graph = graph
        self.cfg = cfg
        self.recon = Reconstruction(
            intrinsics, {im.image_id: im.session_id for im in self.images})
        tracks, tstats = build_tracks(graph, self.images)
        self.recon.tracks = tracks
        self.recon.log.append({"event": "tracks", **tstats})
        # (image_id, kp_idx) -> track id, and per-image track membership
        self.kp_to_track = {}
        self.image_tracks = {im.image_id: [] for im in self.images}
        for tid, t in tracks.items():
            for iid, kp in t.obs:
                if iid in self.image_tracks:
                    self.kp_to_track[(iid, kp)] = tid
                    self.image_tracks[iid].append((tid, kp))
        # per-image count of keypoints on currently triangulated tracks
        self.tri_counts = {im.image_id: 0 for im in self.images}
        self.registration_order = []
        self.retries = {}
        self.skipped = set()
        self.blocked = set()      # deferred until the next global adjustment
        self.rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 77)))

    # -- bookkeeping -----------------------------------------------------------
    def _recount_triangulated(self):
        for iid in self.tri_counts:
            self.tri_counts[iid] = 0
        for t in self.recon.tracks.values():
            if t.state != TRIANGULATED:
                continue
            for iid, _ in t.obs:
                if iid in self.tri_counts:
                    self.tri_counts[iid] += 1

    def _mark_triangulated(self, t):
        for iid, _ in t.obs:
            if iid in self.tri_counts:
                self.tri_counts[iid] += 1

    # -- stages ----------------------------------------------------------------
    def initialize(self):
        a, b = select_seed_pair(self.graph, self.by_id, self.cfg)
        pm = self.graph.get(a, b)
        self.recon.poses[a] = PoseSE3.identity()
        self.recon.poses[b] = pm.rel_pose
        self.recon.gauge = {"fixed_image": a, "seed_pair": [a, b], "baseline": 1.0}
        self.registration_order += [a, b]
        self.recon.log.append({"event": "seed", "pair": [a, b],
                               "inliers": pm.n_inliers,
                               "median_tri_angle_deg": pm.median_tri_angle_deg})
        self.triangulate_for_images([a, b])
        return a, b

    def triangulate_for_images(self, touched_images):
        """Attempt triangulation of untriangulated tracks observing any of the
        touched images; failures stay retriable."""
        touched = set(touched_images)
        tids = sorted({tid for iid in touched for tid, _ in self.image_tracks.get(iid, [])})
        return self._triangulate(tids)

    def triangulate_all(self):
        return self._triangulate(sorted(self.recon.tracks))

    def _triangulate(self, tids):
        k = self.recon.intrinsics
        n_new = 0
        for tid in tids:
            t = self.recon.tracks[tid]
            if t.state != UNTRIANGULATED:
                continue
            obs = [(self.recon.poses[iid], k, t.uv[j])
                   for j, (iid, _) in enumerate(t.obs) if iid in self.recon.poses]
            if len(obs) < 2:
                continue
            try:
                X = triangulate_dlt(obs, self.cfg.min_tri_angle_deg)
            except (DegenerateGeometry, NegativeDepth):
                continue
            # accept only when it reprojects within the pruning threshold
            errs = [np.linalg.norm(
                self._project(pose, X) - uv) for pose, _, uv in obs]
            if max(errs) > self.cfg.bundle.prune_threshold_px:
                continue
            t.point = X
            t.state = TRIANGULATED
            self._mark_triangulated(t)
            n_new += 1
        return n_new

    def _project(self, pose, X):
        k = self.recon.intrinsics
        xc = pose.apply(X)
        if xc[2] <= 1e-12:
            return np.array([1e9, 1e9])
        return np.array([k.fx * xc[0] / xc[2] + k.cx, k.fy * xc[1] / xc[2] + k.cy])

    def next_candidate(self):
        """Unregistered image seeing the most triangulated tracks; None when no
        image reaches the observation floor."""
        best = None
        for iid in sorted(self.by_id):
            if iid in self.recon.poses or iid in self.skipped or iid in self.blocked:
                continue
            c = self.tri_counts[iid]
            if c < self.cfg.min_pnp_observations:
                continue
            if best is None or c > best[1]:
                best = (iid, c)
        return None if best is None else best[0]

    def register_image(self, iid):
        """PnP registration of one image against the triangulated tracks."""
        X, uv = [], []
        for tid, kp in self.image_tracks[iid]:
            t = self.recon.tracks[tid]
            if t.state == TRIANGULATED:
                X.append(t.point)
                uv.append(self.by_id[iid].keypoints.uv[kp])
        if len(X) < self.cfg.min_pnp_observations:
            raise NotEnoughInliers(f"{len(X)} PnP observations")
        pose, mask = solve_pnp(np.asarray(X), np.asarray(uv),
                               self.recon.intrinsics, self.cfg.ransac, rng=self.rng)
        self.recon.poses[iid] = pose
        self.registration_order.append(iid)
        self.recon.log.append({"event": "register", "image_id": iid,
                               "n_correspondences": len(X),
                               "n_inliers": int(mask.sum())})
        return pose

    def _local_ba(self):
        window = [i for i in self.registration_order[-self.cfg.local_window:]]
        cfg = replace(self.cfg.bundle, max_iterations=self.cfg.local_ba_iters)
        bundle_adjust(self.recon, cfg, free_images=window)

    def _global_ba(self, final=False):
        iters = self.cfg.final_ba_iters if final else self.cfg.global_ba_iters
        cfg = replace(self.cfg.bundle, max_iterations=iters)
        trace = bundle_adjust(self.recon, cfg)
        removed = prune_observations(self.recon, self.cfg.bundle.prune_threshold_px)
        self.triangulate_all()
        self._recount_triangulated()
        self.blocked.clear()
        self.recon.log.append({
            "event": "global_ba", "final": final,
            "cost": trace["costs"][-1] if trace["costs"] else 0.0,
            "pruned_observations": removed,
            "n_registered": self.recon.n_registered()})
        return trace

    def run(self):
        self.initialize()
        self._local_ba()
        since_global = 0
        while True:
            iid = self.next_candidate()
            if iid is None:
                if self.blocked:
                    # give deferred images another chance after a refinement
                    self._global_ba()
                    since_global = 0
                    if self.next_candidate() is not None:
                        continue
                break
            try:
                self.register_image(iid)
            except (NotEnoughInliers, DegenerateConfiguration) as exc:
                n = self.retries.get(iid, 0) + 1
                self.retries[iid] = n
                if n > self.cfg.max_registration_retries:
                    self.skipped.add(iid)
                    self.recon.log.append({"event": "skip", "image_id": iid,
                                           "reason": str(exc)})
                else:
                    self.blocked.add(iid)
                    self.recon.log.append({"event": "defer", "image_id": iid,
                                           "attempt": n, "reason": str(exc)})
                continue
            self.triangulate_for_images([iid])
            self._local_ba()
            since_global += 1
            if since_global >= self.cfg.global_every:
                self._global_ba()
                since_global = 0
        self._global_ba(final=True)
        self.recon.log.append({
            "event": "done",
            "n_registered": self.recon.n_registered(),
            "n_skipped": len(self.skipped),
            "skipped": sorted(self.skipped),
            "n_triangulated": len(self.recon.triangulated_tracks())})
        return self.recon


def reconstruct_joint(images, graph: MatchGraph, intrinsics,
                      cfg: SfmConfig | None = None) -> Reconstruction:
    """One incremental reconstruction over all images and the full graph."""
    cfg = cfg or SfmConfig()
    return IncrementalMapper(images, graph, intrinsics, cfg).run()


def _session_subgraph(graph: MatchGraph, image_ids):
    ids = set(image_ids)
    sub = MatchGraph()
    for (a, b), pm in graph.pairs.items():
        if a in ids and b in ids:
            sub.pairs[(a, b)] = pm
    return sub


def reconstruct_per_session(images, graph: MatchGraph, intrinsics,
                            cfg: SfmConfig | None = None):
    """Independent reconstruction of every session from its same-session
    pairs. Returns (session_id -> Reconstruction, session_id -> failure str);
    a session lands in the failure dict when no viable seed pair exists."""
    cfg = cfg or SfmConfig()
    sessions = sorted({im.session_id for im in images})
    recons, failures = {}, {}
    for s in sessions:
        imgs = [im for im in images if im.session_id == s]
        sub = _session_subgraph(graph, [im.image_id for im in imgs])
        try:
            recons[s] = IncrementalMapper(imgs, sub, intrinsics, cfg).run()
        except NoViablePair as exc:
            failures[s] = str(exc)
    return recons, failures
