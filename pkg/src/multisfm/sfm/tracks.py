"""Track building: union-find over (image, keypoint) nodes linked by verified
match-graph inliers."""
from __future__ import annotations

import numpy as np

from .reconstruction import Track


class _UnionFind:
    def __init__(self):
        self.parent = {}
        self.rank = {}

    def find(self, x):
        p = self.parent.setdefault(x, x)
        if p == x:
            return x
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        self.rank.setdefault(ra, 0)
        self.rank.setdefault(rb, 0)
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


def build_tracks(graph, images):
    """Tracks from match-graph inliers.

    Components containing two keypoints of the same image are discarded
    entirely; surviving tracks have length >= 2. Returns (tracks dict,
    stats dict).
    """
    by_id = {im.image_id: im for im in images}
    uf = _UnionFind()
    for (a, b), pm in sorted(graph.pairs.items()):
        for ia, ib in pm.inlier_matches():
            uf.union((a, int(ia)), (b, int(ib)))

    comps = {}
    for node in uf.parent:
        comps.setdefault(uf.find(node), []).append(node)

    tracks = {}
    n_conflict = 0
    tid = 0
    for root in sorted(comps):
        nodes = sorted(comps[root])
        if len(nodes) < 2:
            continue
        imgs = [n[0] for n in nodes]
        if len(set(imgs)) != len(imgs):
            n_conflict += 1
            continue
        uv = np.array([by_id[i].keypoints.uv[k] for i, k in nodes])
        tracks[tid] = Track(tid, nodes, uv)
        tid += 1
    stats = {"n_tracks": len(tracks), "n_conflicting": n_conflict}
    return tracks, stats
