"""Visual place recognition stand-in: rotation-invariant global descriptors,
image distance matrix and cross-session candidate pair selection."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyImage
from .keypoints import Keypoints


@dataclass
class GlobalDescriptor:
    image_id: int
    vector: np.ndarray  # unit norm


@dataclass
class DistanceMatrix:
    image_ids: list
    d: np.ndarray  # (N,N) symmetric, zero diagonal

    def index_of(self, image_id):
        return self.image_ids.index(image_id)

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["image_id"] + [str(i) for i in self.image_ids])
            for i, iid in enumerate(self.image_ids):
                w.writerow([iid] + [f"{x:.9f}" for x in self.d[i]])


@dataclass
class CandidatePairs:
    pairs: set          # canonical (a,b) with a < b, sessions differ
    k: int | None
    max_dist: float

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(sorted(self.pairs))


def compute_global_descriptor(image_id, keypoints: Keypoints, stable_dim=16) -> GlobalDescriptor:
    """Mean-pooled stable sub-descriptors, renormalized.

    Pooling ignores pixel positions and orientations, so the descriptor is
    invariant to image roll by construction.
    """
    if len(keypoints) == 0:
        raise EmptyImage(f"image {image_id} has no keypoints")
    v = keypoints.desc[:, :stable_dim].mean(axis=0)
    n = np.linalg.norm(v)
    if n < 1e-12:
        # degenerate pooling; keep a deterministic unit vector
        v = np.zeros(stable_dim)
        v[0] = 1.0
        n = 1.0
    return GlobalDescriptor(image_id, v / n)


def compute_distance_matrix(descriptors) -> DistanceMatrix:
    """Pairwise Euclidean distances between global descriptors."""
    if len(descriptors) == 0:
        raise EmptyImage("no descriptors")
    ids = [g.image_id for g in descriptors]
    V = np.array([g.vector for g in descriptors])
    sq = np.maximum((V * V).sum(1)[:, None] + (V * V).sum(1)[None, :] - 2 * V @ V.T, 0.0)
    d = np.sqrt(sq)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(ids, d)


def cross_session_distance_percentile(m: DistanceMatrix, session_of, pct=60.0):
    """Percentile of cross-session entries; used for the default max_dist."""
    ids = m.image_ids
    vals = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if session_of[ids[i]] != session_of[ids[j]]:
                vals.append(m.d[i, j])
    if not vals:
        return np.inf
    return float(np.percentile(vals, pct))


def select_cross_session_pairs(m: DistanceMatrix, session_of, k=10,
                               max_dist=np.inf) -> CandidatePairs:
    """For every image, its k nearest images from other sessions within
    max_dist; the union, canonicalized. Never emits same-session pairs."""
    if k is not None and k < 1:
        raise ValueError("k must be >= 1")
    ids = m.image_ids
    n = len(ids)
    pairs = set()
    for i in range(n):
        other = [j for j in range(n) if j != i and session_of[ids[j]] != session_of[ids[i]]]
        if not other:
            continue
        dists = m.d[i, other]
        order = np.argsort(dists, kind="stable")
        limit = len(order) if k is None else min(k, len(order))
        for o in order[:limit]:
            if dists[o] <= max_dist:
                a, b = sorted((ids[i], ids[other[o]]))
                pairs.add((a, b))
    return CandidatePairs(pairs, k, float(max_dist))
