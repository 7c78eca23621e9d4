"""Pairwise feature matching and match-graph construction.

Two matcher models with the same interface:

* `match_handcrafted` — rotation-invariant, cheap, uses the full descriptor
  with a strict ratio test. Works well between images taken close in time,
  degrades heavily once the appearance part of the descriptors has drifted.
* `match_robust` — appearance-robust but roll-sensitive: it matches on the
  stable descriptor subspace and only trusts correspondences whose relative
  keypoint orientation (after any rotation compensation) is close to zero,
  mirroring learned matchers that tolerate appearance change but not large
  in-plane rotation. `rotation_augmented_match` compensates by trying the
  four canonical image rotations and keeping the best verified one.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NotEnoughInliers
from .geometry import (
    CameraIntrinsics,
    PoseSE3,
    RansacConfig,
    estimate_relative_pose,
    relative_pose_triangulation_angle,
)
from .keypoints import Keypoints

GRAPH_SCHEMA_VERSION = 1

ROTATIONS_DEG = (0, 90, 180, 270)


@dataclass
class MatchingConfig:
    ratio_handcrafted: float = 0.8
    ratio_robust: float = 0.9
    orientation_gate_deg: float = 20.0
    stable_dim: int = 16
    min_inliers: int = 15
    handcrafted_cost_units: float = 1.0
    robust_cost_units: float = 50.0
    seed: int = 0
    # verification budget: good pairs exit early via the confidence test, the
    # cap only bounds time spent on pairs that cannot be verified anyway
    ransac: RansacConfig = field(default_factory=lambda: RansacConfig(max_iters=800))


@dataclass
class PairMatches:
    """Verified matches of one image pair, stored with image_a < image_b."""

    image_a: int
    image_b: int
    matches: np.ndarray          # (M,2) keypoint indices (a-side, b-side)
    inlier_mask: np.ndarray      # (M,) bool
    provenance: str              # e.g. intra_handcrafted / cross_robust
    rotation_deg: int = 0
    wall_time: float = 0.0
    admitted: bool = False
    rel_pose: PoseSE3 | None = None   # pose of b w.r.t. a, unit baseline
    median_tri_angle_deg: float = 0.0

    @property
    def n_inliers(self):
        return int(self.inlier_mask.sum())

    def inlier_matches(self):
        return self.matches[self.inlier_mask]

    def swapped(self) -> "PairMatches":
        """Index-swapped view for querying the pair as (b, a)."""
        return PairMatches(
            self.image_b, self.image_a, self.matches[:, ::-1].copy(), self.inlier_mask,
            self.provenance, self.rotation_deg, self.wall_time, self.admitted,
            self.rel_pose.inverse() if self.rel_pose is not None else None,
            self.median_tri_angle_deg,
        )

    def to_dict(self):
        return {
            "image_a": self.image_a,
            "image_b": self.image_b,
            "matches": self.matches.tolist(),
            "inlier_mask": self.inlier_mask.astype(int).tolist(),
            "provenance": self.provenance,
            "rotation_deg": self.rotation_deg,
            "wall_time": self.wall_time,
            "admitted": self.admitted,
            "rel_pose": self.rel_pose.to_dict() if self.rel_pose is not None else None,
            "median_tri_angle_deg": self.median_tri_angle_deg,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["image_a"], d["image_b"],
            np.asarray(d["matches"], dtype=np.int64).reshape(-1, 2),
            np.asarray(d["inlier_mask"], dtype=bool),
            d["provenance"], d["rotation_deg"], d["wall_time"], d["admitted"],
            PoseSE3.from_dict(d["rel_pose"]) if d["rel_pose"] else None,
            d["median_tri_angle_deg"],
        )


class MatchGraph:
    """Admitted pairwise matches plus per-strategy accounting."""

    def __init__(self):
        self.pairs: dict[tuple[int, int], PairMatches] = {}
        self.stats: dict[str, dict] = {}

    def add(self, pm: PairMatches):
        key = (pm.image_a, pm.image_b)
        assert key[0] < key[1], "pairs must be stored in canonical order"
        st = self.stats.setdefault(pm.provenance, {
            "pairs_attempted": 0, "pairs_admitted": 0, "invocations": 0,
            "wall_time": 0.0, "cost_units": 0.0,
        })
        st["pairs_attempted"] += 1
        st["wall_time"] += pm.wall_time
        if pm.admitted:
            st["pairs_admitted"] += 1
            self.pairs[key] = pm

    def record_cost(self, provenance, invocations, cost_units):
        st = self.stats.setdefault(provenance, {
            "pairs_attempted": 0, "pairs_admitted": 0, "invocations": 0,
            "wall_time": 0.0, "cost_units": 0.0,
        })
        st["invocations"] += invocations
        st["cost_units"] += cost_units

    def get(self, a, b) -> PairMatches | None:
        if a < b:
            return self.pairs.get((a, b))
        pm = self.pairs.get((b, a))
        return pm.swapped() if pm is not None else None

    def __len__(self):
        return len(self.pairs)

    def pair_count(self, provenance_prefix=""):
        return sum(1 for pm in self.pairs.values() if pm.provenance.startswith(provenance_prefix))

    def to_dict(self):
        return {
            "schema_version": GRAPH_SCHEMA_VERSION,
            "pairs": [pm.to_dict() for _, pm in sorted(self.pairs.items())],
            "stats": self.stats,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != GRAPH_SCHEMA_VERSION:
            raise ValueError(f"unsupported graph schema: {d.get('schema_version')}")
        g = cls()
        for pd in d["pairs"]:
            g.pairs[(pd["image_a"], pd["image_b"])] = PairMatches.from_dict(pd)
        g.stats = d["stats"]
        return g

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, separators=(",", ":"), sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# pairwise matchers
# ---------------------------------------------------------------------------

def _wrap_pi(a):
    """Wrap angles to (-pi, pi]."""
    return np.mod(a + np.pi, 2 * np.pi) - np.pi


def _circular_median(angles):
    """Robust circular median: circular mean plus median wrapped deviation."""
    mu = np.arctan2(np.sin(angles).sum(), np.cos(angles).sum())
    return mu + np.median(_wrap_pi(angles - mu))


def _mutual_nn_ratio(da, db, ratio):
    """Mutual nearest neighbors passing the Lowe ratio test on side a."""
    if len(da) == 0 or len(db) == 0:
        return np.empty((0, 2), dtype=np.int64)
    d2 = np.maximum(
        (da * da).sum(axis=1)[:, None] + (db * db).sum(axis=1)[None, :] - 2 * da @ db.T, 0.0
    )
    nn_b = np.argmin(d2, axis=1)
    if d2.shape[1] >= 2:
        part = np.partition(d2, 1, axis=1)
        best, second = part[:, 0], part[:, 1]
        ok = np.sqrt(best) <= ratio * np.sqrt(np.maximum(second, 1e-30))
    else:
        ok = np.ones(len(da), dtype=bool)
    nn_a = np.argmin(d2, axis=0)
    mutual = nn_a[nn_b] == np.arange(len(da))
    ia = np.flatnonzero(ok & mutual)
    return np.column_stack([ia, nn_b[ia]]).astype(np.int64)


def _orientation_gate(matches, kpsA, kpsB, gate_rad, anchor_zero):
    if len(matches) == 0:
        return matches
    rel = _wrap_pi(kpsB.orient[matches[:, 1]] - kpsA.orient[matches[:, 0]])
    center = 0.0 if anchor_zero else _circular_median(rel)
    keep = np.abs(_wrap_pi(rel - center)) <= gate_rad
    return matches[keep]


def match_handcrafted(kpsA: Keypoints, kpsB: Keypoints, cfg: MatchingConfig):
    """Mutual-NN over the full descriptor with ratio test and a roll-invariant
    orientation consistency gate (deviation from the circular median)."""
    m = _mutual_nn_ratio(kpsA.desc, kpsB.desc, cfg.ratio_handcrafted)
    return _orientation_gate(m, kpsA, kpsB, np.deg2rad(cfg.orientation_gate_deg),
                             anchor_zero=False)


def match_robust(kpsA: Keypoints, kpsB: Keypoints, cfg: MatchingConfig):
    """Mutual-NN over the stable descriptor subspace with its own ratio and a
    zero-anchored orientation gate (roll-sensitive; see module docstring)."""
    m = _mutual_nn_ratio(kpsA.desc[:, : cfg.stable_dim], kpsB.desc[:, : cfg.stable_dim],
                         cfg.ratio_robust)
    return _orientation_gate(m, kpsA, kpsB, np.deg2rad(cfg.orientation_gate_deg),
                             anchor_zero=True)


# ---------------------------------------------------------------------------
# verification and rotation augmentation
# ---------------------------------------------------------------------------

def verify_pair_geometry(raw_matches, kpsA: Keypoints, kpsB: Keypoints,
                         ka: CameraIntrinsics, cfg: MatchingConfig,
                         kb: CameraIntrinsics | None = None, rng=None) -> PairMatches:
    """Two-view geometric verification of raw matches.

    Returns a PairMatches with `admitted` set iff the verified inlier count
    reaches cfg.min_inliers; rejection is a normal outcome.
    """
    kb = kb or ka
    raw_matches = np.asarray(raw_matches, dtype=np.int64).reshape(-1, 2)
    pm = PairMatches(-1, -1, raw_matches, np.zeros(len(raw_matches), dtype=bool),
                     provenance="", admitted=False)
    if len(raw_matches) < 8:
        return pm
    pa = kpsA.uv[raw_matches[:, 0]]
    pb = kpsB.uv[raw_matches[:, 1]]
    try:
        pose, mask = estimate_relative_pose(pa, pb, ka, kb, cfg.ransac, rng=rng)
    except NotEnoughInliers:
        return pm
    pm.inlier_mask = mask
    pm.rel_pose = pose
    pm.admitted = int(mask.sum()) >= cfg.min_inliers
    if pm.admitted:
        pm.median_tri_angle_deg = relative_pose_triangulation_angle(
            pose, pa[mask], pb[mask], ka, kb)
    return pm


def rotation_augmented_match(kpsA: Keypoints, kpsB: Keypoints, base_matcher,
                             cfg: MatchingConfig, k: CameraIntrinsics, rng=None):
    """Try the four canonical rotations of image B and keep the rotation with
    the strongest verified evidence (post-verification inlier count; ties break
    toward 0 deg then ascending). Returns (raw matches, rotation_deg)."""
    pm, rot, raw = _rotation_augmented_verified(kpsA, kpsB, base_matcher, cfg, k, rng=rng)
    return raw, rot


def _rotation_augmented_verified(kpsA, kpsB, base_matcher, cfg, k, rng=None,
                                 forced_rotation=None):
    best = None
    rotations = (forced_rotation,) if forced_rotation is not None else ROTATIONS_DEG
    for r in rotations:
        kb_rot = kpsB.rotated(np.deg2rad(r), k.width, k.height) if r else kpsB
        raw = base_matcher(kpsA, kb_rot, cfg)
        # verification always runs on the original detected pixel coordinates
        if len(raw) >= max(8, cfg.min_inliers):
            pm = verify_pair_geometry(raw, kpsA, kpsB, k, cfg, rng=rng)
        else:
            pm = PairMatches(-1, -1, np.asarray(raw, dtype=np.int64).reshape(-1, 2),
                             np.zeros(len(raw), dtype=bool), provenance="")
        if best is None or pm.n_inliers > best[0].n_inliers:
            best = (pm, r, raw)
    return best


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

POLICIES = ("hybrid_vpr", "robust_cross", "robust_all", "handcrafted_all")


def _canonical_cross_pairs(images):
    out = []
    for i in range(len(images)):
        for j in range(i + 1, len(images)):
            if images[i].session_id != images[j].session_id:
                a, b = sorted((images[i].image_id, images[j].image_id))
                out.append((a, b))
    return sorted(out)


def _canonical_intra_pairs(images):
    out = []
    for i in range(len(images)):
        for j in range(i + 1, len(images)):
            if images[i].session_id == images[j].session_id:
                a, b = sorted((images[i].image_id, images[j].image_id))
                out.append((a, b))
    return sorted(out)


def build_match_graph(images, candidate_pairs, cfg: MatchingConfig, k: CameraIntrinsics,
                      policy="hybrid_vpr", threads=1) -> MatchGraph:
    """Build the pairwise match graph under a matching policy.

    hybrid_vpr (default): exhaustive handcrafted matching within sessions,
    rotation-augmented robust matching on the candidate cross-session pairs.
    robust_cross: like hybrid_vpr with all cross-session pairs as candidates.
    robust_all: rotation-augmented robust matching on every pair.
    handcrafted_all: handcrafted matching on every pair.

    Output (including accounting, but not wall times) is deterministic for a
    fixed cfg.seed regardless of `threads`.
    """
    by_id = {im.image_id: im for im in images}
    intra = _canonical_intra_pairs(images)
    cross = _canonical_cross_pairs(images)

    if policy == "hybrid_vpr":
        if candidate_pairs is None:
            raise ValueError("hybrid_vpr requires candidate pairs")
        cand = sorted(set(getattr(candidate_pairs, "pairs", candidate_pairs)))
        jobs = [(p, "intra_handcrafted") for p in intra] + [(p, "cross_robust") for p in cand]
    elif policy == "robust_cross":
        jobs = [(p, "intra_handcrafted") for p in intra] + [(p, "cross_robust") for p in cross]
    elif policy == "robust_all":
        jobs = [(p, "all_robust") for p in intra + cross]
    elif policy == "handcrafted_all":
        jobs = ([(p, "intra_handcrafted") for p in intra]
                + [(p, "cross_handcrafted") for p in cross])
    else:
        raise ValueError(f"unknown policy {policy!r}")
    jobs.sort()

    def run(job):
        (a, b), prov = job
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, a, b)))
        kpa, kpb = by_id[a].keypoints, by_id[b].keypoints
        t0 = time.perf_counter()
        if prov.endswith("handcrafted"):
            raw = match_handcrafted(kpa, kpb, cfg)
            if len(raw) >= max(8, cfg.min_inliers):
                pm = verify_pair_geometry(raw, kpa, kpb, k, cfg, rng=rng)
            else:
                pm = PairMatches(-1, -1, np.asarray(raw).reshape(-1, 2),
                                 np.zeros(len(raw), dtype=bool), provenance="")
            rot = 0
            invocations, cost = 1, cfg.handcrafted_cost_units
        else:
            pm, rot, _ = _rotation_augmented_verified(kpa, kpb, match_robust, cfg, k, rng=rng)
            invocations, cost = 1, cfg.robust_cost_units
        pm.image_a, pm.image_b = a, b
        pm.provenance = prov
        pm.rotation_deg = rot
        pm.wall_time = time.perf_counter() - t0
        return pm, prov, invocations, cost

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    graph = MatchGraph()
    for pm, prov, invocations, cost in results:  # canonical order from sorted jobs
        graph.add(pm)
        graph.record_cost(prov, invocations, cost)
    return graph
