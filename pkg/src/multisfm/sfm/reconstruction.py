"""Reconstruction container: registered poses, triangulated tracks, gauge
bookkeeping, serialization (JSON + PLY point cloud)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, PoseSE3, project_many

RECON_SCHEMA_VERSION = 1

UNTRIANGULATED = "untriangulated"
TRIANGULATED = "triangulated"
REJECTED = "rejected"

# per-session point colors for PLY export (blue, yellow, pink), grey for
# multi-session points
SESSION_COLORS = {0: (66, 111, 212), 1: (243, 201, 9), 2: (227, 119, 194)}
MULTI_COLOR = (127, 127, 127)
FALLBACK_COLOR = (30, 180, 110)


@dataclass
class Track:
    track_id: int
    obs: list                      # [(image_id, kp_idx), ...], unique image ids
    uv: np.ndarray                 # (n_obs, 2) measured pixels
    point: np.ndarray | None = None
    state: str = UNTRIANGULATED

    def observation_count(self):
        return len(self.obs)

    def image_ids(self):
        return [o[0] for o in self.obs]

    def remove_observation(self, idx):
        self.obs = self.obs[:idx] + self.obs[idx + 1:]
        self.uv = np.delete(self.uv, idx, axis=0)

    def to_dict(self):
        return {
            "track_id": self.track_id,
            "obs": [[int(i), int(k)] for i, k in self.obs],
            "uv": np.round(self.uv, 4).tolist(),
            "point": None if self.point is None else np.round(self.point, 9).tolist(),
            "state": self.state,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["track_id"], [tuple(o) for o in d["obs"]],
                   np.asarray(d["uv"], dtype=float).reshape(-1, 2),
                   None if d["point"] is None else np.asarray(d["point"], dtype=float),
                   d["state"])


@dataclass
class Reconstruction:
    intrinsics: CameraIntrinsics
    session_of: dict                       # image_id -> session_id
    poses: dict = field(default_factory=dict)       # image_id -> PoseSE3 (registered)
    tracks: dict = field(default_factory=dict)      # track_id -> Track
    gauge: dict = field(default_factory=dict)       # fixed_image, seed_pair, baseline
    log: list = field(default_factory=list)         # registration events

    # -- queries -------------------------------------------------------------
    def registered_images(self):
        return sorted(self.poses)

    def n_registered(self):
        return len(self.poses)

    def triangulated_tracks(self):
        return [t for t in self.tracks.values() if t.state == TRIANGULATED]

    def registered_sessions(self):
        return sorted({self.session_of[i] for i in self.poses})

    def track_session_span(self, track: Track):
        return sorted({self.session_of[i] for i, _ in track.obs if i in self.poses})

    def observations_in_image(self, image_id):
        """[(track_id, kp_idx, uv)] of triangulated tracks observing an image."""
        out = []
        for t in self.tracks.values():
            if t.state != TRIANGULATED:
                continue
            for j, (iid, kp) in enumerate(t.obs):
                if iid == image_id:
                    out.append((t.track_id, kp, t.uv[j]))
        return out

    def residuals(self):
        """(track_id, image_id, error_px) for every observation of a
        triangulated track in a registered image."""
        out = []
        for t in self.triangulated_tracks():
            for j, (iid, _) in enumerate(t.obs):
                pose = self.poses.get(iid)
                if pose is None:
                    continue
                uv, z = project_many(t.point, pose, self.intrinsics)
                if z[0] <= 0 or not np.all(np.isfinite(uv[0])):
                    out.append((t.track_id, iid, np.inf))
                else:
                    out.append((t.track_id, iid, float(np.linalg.norm(uv[0] - t.uv[j]))))
        return out

    def point_cloud(self):
        """(points (N,3), track_ids (N,), session_spans list-of-tuples)."""
        tracks = self.triangulated_tracks()
        pts = np.array([t.point for t in tracks]).reshape(-1, 3)
        ids = np.array([t.track_id for t in tracks], dtype=np.int64)
        spans = [tuple(self.track_session_span(t)) for t in tracks]
        return pts, ids, spans

    # -- serialization ---------------------------------------------------------
    def to_dict(self):
        return {
            "schema_version": RECON_SCHEMA_VERSION,
            "intrinsics": self.intrinsics.to_dict(),
            "session_of": {str(k): v for k, v in self.session_of.items()},
            "poses": {str(k): p.to_dict() for k, p in sorted(self.poses.items())},
            "tracks": [t.to_dict() for _, t in sorted(self.tracks.items())],
            "gauge": self.gauge,
            "log": self.log,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != RECON_SCHEMA_VERSION:
            raise ValueError(f"unsupported reconstruction schema: {d.get('schema_version')}")
        r = cls(
            CameraIntrinsics.from_dict(d["intrinsics"]),
            {int(k): v for k, v in d["session_of"].items()},
        )
        r.poses = {int(k): PoseSE3.from_dict(p) for k, p in d["poses"].items()}
        r.tracks = {t["track_id"]: Track.from_dict(t) for t in d["tracks"]}
        r.gauge = d["gauge"]
        r.log = d["log"]
        return r

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, separators=(",", ":"), sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save_ply(self, path):
        """ASCII PLY with per-session coloring (multi-session points grey)."""
        pts, _, spans = self.point_cloud()
        lines = [
            "ply", "format ascii 1.0", f"element vertex {len(pts)}",
            "property float x", "property float y", "property float z",
            "property uchar red", "property uchar green", "property uchar blue",
            "end_header",
        ]
        for p, span in zip(pts, spans):
            if len(span) > 1:
                c = MULTI_COLOR
            else:
                c = SESSION_COLORS.get(span[0] if span else -1, FALLBACK_COLOR)
            lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
