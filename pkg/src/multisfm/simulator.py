"""Synthetic multi-session survey generator.

Produces a landmark field on a bumpy seafloor-like surface, per-session
lawnmower camera trajectories with per-image roll, keypoint observations with
controllable appearance drift and structural change, and exact ground-truth
annotated cross-session image pairs for evaluation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, InsufficientOverlap
from .geometry import CameraIntrinsics, PoseSE3, project_many, rot_to_quat, rot_about_axis
from .keypoints import Keypoints

SCENE_SCHEMA_VERSION = 1

CANONICAL_ROLLS = np.deg2rad([0.0, 90.0, 180.0, 270.0])


def wrap_angle(a):
    """Wrap to [0, 2pi)."""
    return np.mod(a, 2 * np.pi)


@dataclass
class SessionConfig:
    session_id: int
    year_label: str = ""
    n_images: int = 50
    p_alive: float = 1.0
    displacement_sigma: float = 0.0
    drift_magnitude: float = 0.0          # appearance drift in [0, 1]
    line_spacing: float = 0.55
    altitude: float = 1.2
    altitude_jitter: float = 0.03
    trajectory_angle_deg: float = 0.0     # lawnmower leg direction
    trajectory_offset: float = 0.0        # lateral shift of the leg grid
    roll_jitter_deg: float = 5.0
    tilt_jitter_deg: float = 1.5

    def __post_init__(self):
        if not (0.0 <= self.p_alive <= 1.0):
            raise ConfigError("p_alive must be in [0, 1]")
        if not (0.0 <= self.drift_magnitude <= 1.0):
            raise ConfigError("drift_magnitude must be in [0, 1]")
        if self.n_images <= 0:
            raise ConfigError("image count must be positive")


def _default_intrinsics():
    return CameraIntrinsics(fx=800.0, fy=800.0, cx=400.0, cy=300.0, width=800, height=600)


@dataclass
class SceneConfig:
    extent_x: float = 3.0
    extent_y: float = 3.0
    margin: float = 0.8                   # landmark field border beyond the trajectory area
    landmark_density: float = 150.0       # landmarks per square unit
    bump_count: int = 40
    bump_height: float = 0.35
    bump_radius: float = 0.4
    descriptor_dim: int = 64
    stable_dim: int = 16
    descriptor_noise: float = 0.012
    pixel_noise: float = 0.5
    clutter_fraction: float = 0.2
    min_keypoints: int = 50
    intrinsics: CameraIntrinsics = field(default_factory=_default_intrinsics)
    sessions: list[SessionConfig] = field(default_factory=lambda: [
        SessionConfig(0, "2016", n_images=50),
        SessionConfig(1, "2017", n_images=63, p_alive=0.7, drift_magnitude=0.8,
                      displacement_sigma=0.002, trajectory_angle_deg=90.0),
        SessionConfig(2, "2018", n_images=52, p_alive=0.7, drift_magnitude=0.8,
                      displacement_sigma=0.002, trajectory_angle_deg=0.0,
                      trajectory_offset=0.25),
    ])

    def __post_init__(self):
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ConfigError("scene extents must be positive")
        if not (0 < self.stable_dim < self.descriptor_dim):
            raise ConfigError("stable_dim must be inside the descriptor")


@dataclass
class Landmark:
    """View of one landmark including its per-session state."""

    id: int
    position: np.ndarray
    base_descriptor: np.ndarray
    base_orientation: float
    alive: dict
    displacement: dict


@dataclass
class SurveyImage:
    image_id: int
    session_id: int
    pose: PoseSE3            # ground truth, world-to-camera
    roll: float              # radians
    keypoints: Keypoints

    def to_dict(self):
        return {
            "image_id": self.image_id,
            "session_id": self.session_id,
            "pose": self.pose.to_dict(),
            "roll": self.roll,
            "keypoints": self.keypoints.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["image_id"], d["session_id"], PoseSE3.from_dict(d["pose"]),
                   d["roll"], Keypoints.from_dict(d["keypoints"]))


@dataclass
class AnnotatedPair:
    query_image_id: int
    db_image_id: int
    query_uv: np.ndarray      # (M,2) exact ground-truth pixels
    db_uv: np.ndarray         # (M,2)
    landmark_ids: np.ndarray  # (M,)

    def to_dict(self):
        return {
            "query_image_id": self.query_image_id,
            "db_image_id": self.db_image_id,
            "query_uv": self.query_uv.tolist(),
            "db_uv": self.db_uv.tolist(),
            "landmark_ids": self.landmark_ids.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["query_image_id"], d["db_image_id"],
                   np.asarray(d["query_uv"], dtype=float),
                   np.asarray(d["db_uv"], dtype=float),
                   np.asarray(d["landmark_ids"], dtype=np.int64))


class SyntheticScene:
    """Ground-truth container. Identical seeds produce bit-identical scenes."""

    def __init__(self, cfg: SceneConfig, seed: int, positions, base_desc, base_orient,
                 alive, displacement, session_desc, images, rejected_images=0):
        self.cfg = cfg
        self.seed = seed
        self.positions = positions            # (L,3) base landmark positions
        self.base_desc = base_desc            # (L,D) unit descriptors
        self.base_orient = base_orient        # (L,)
        self.alive = alive                    # {session_id: (L,) bool}
        self.displacement = displacement      # {session_id: (L,3)}
        self.session_desc = session_desc      # {session_id: (L,D) drifted descriptors}
        self.images = images                  # list[SurveyImage]
        self.rejected_images = rejected_images
        self._by_id = {im.image_id: im for im in images}

    # -- accessors ---------------------------------------------------------
    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.cfg.intrinsics

    @property
    def n_landmarks(self):
        return len(self.positions)

    def image(self, image_id) -> SurveyImage:
        return self._by_id[image_id]

    def session_of(self):
        return {im.image_id: im.session_id for im in self.images}

    def session_ids(self):
        return sorted({s.session_id for s in self.cfg.sessions})

    def landmark(self, lid) -> Landmark:
        return Landmark(
            lid, self.positions[lid], self.base_desc[lid], float(self.base_orient[lid]),
            {s: bool(self.alive[s][lid]) for s in self.alive},
            {s: self.displacement[s][lid] for s in self.displacement},
        )

    def landmark_position(self, lid, session_id):
        """Session-specific landmark position (base + displacement)."""
        return self.positions[lid] + self.displacement[session_id][lid]

    def visible_landmarks(self, image_id):
        """Ground-truth landmark ids observed in an image (clutter excluded)."""
        ids = self.images_keypoints(image_id).landmark_id
        return set(ids[ids >= 0].tolist())

    def images_keypoints(self, image_id) -> Keypoints:
        return self._by_id[image_id].keypoints

    def covisible_landmarks(self, img_a, img_b):
        return self.visible_landmarks(img_a) & self.visible_landmarks(img_b)

    # -- serialization ------------------------------------------------------
    def to_dict(self):
        sids = self.session_ids()
        return {
            "schema_version": SCENE_SCHEMA_VERSION,
            "seed": self.seed,
            "config": scene_config_to_dict(self.cfg),
            "landmarks": {
                "positions": np.round(self.positions, 9).tolist(),
                "base_desc": np.round(self.base_desc, 9).tolist(),
                "base_orient": np.round(self.base_orient, 9).tolist(),
            },
            "session_state": {
                str(s): {
                    "alive": self.alive[s].astype(int).tolist(),
                    "displacement": np.round(self.displacement[s], 9).tolist(),
                    "session_desc": np.round(self.session_desc[s], 9).tolist(),
                }
                for s in sids
            },
            "images": [im.to_dict() for im in self.images],
            "rejected_images": self.rejected_images,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCENE_SCHEMA_VERSION:
            raise ConfigError(f"unsupported scene schema: {d.get('schema_version')}")
        cfg = scene_config_from_dict(d["config"])
        lm = d["landmarks"]
        alive, disp, sdesc = {}, {}, {}
        for s, st in d["session_state"].items():
            sid = int(s)
            alive[sid] = np.asarray(st["alive"], dtype=bool)
            disp[sid] = np.asarray(st["displacement"], dtype=float)
            sdesc[sid] = np.asarray(st["session_desc"], dtype=float)
        return cls(
            cfg, d["seed"],
            np.asarray(lm["positions"], dtype=float),
            np.asarray(lm["base_desc"], dtype=float),
            np.asarray(lm["base_orient"], dtype=float),
            alive, disp, sdesc,
            [SurveyImage.from_dict(x) for x in d["images"]],
            d.get("rejected_images", 0),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, separators=(",", ":"), sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def scene_config_to_dict(cfg: SceneConfig):
    d = asdict(cfg)
    d["intrinsics"] = cfg.intrinsics.to_dict()
    return d


def scene_config_from_dict(d):
    d = dict(d)
    d["intrinsics"] = CameraIntrinsics.from_dict(d["intrinsics"])
    d["sessions"] = [SessionConfig(**s) for s in d["sessions"]]
    return SceneConfig(**d)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _height_field(cfg: SceneConfig, rng):
    lo = -cfg.margin
    centers = np.column_stack([
        rng.uniform(lo, cfg.extent_x + cfg.margin, cfg.bump_count),
        rng.uniform(lo, cfg.extent_y + cfg.margin, cfg.bump_count),
    ])
    amps = rng.uniform(-cfg.bump_height, cfg.bump_height, cfg.bump_count)

    def h(xy):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        d2 = ((xy[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        return (amps * np.exp(-d2 / (2 * cfg.bump_radius ** 2))).sum(axis=1)

    return h


def _lawnmower_positions(cfg: SceneConfig, s: SessionConfig, rng):
    """Boustrophedon waypoint positions for one session."""
    ex, ey = cfg.extent_x, cfg.extent_y
    n_legs = max(2, int(np.ceil(ey / s.line_spacing)))
    ys = (np.arange(n_legs) + 0.5) * ey / n_legs
    ys = np.clip(ys + s.trajectory_offset, 0.05 * ey, 0.95 * ey)
    leg_len = ex
    total = n_legs * leg_len
    d = (np.arange(s.n_images) + 0.5) * total / s.n_images
    leg = np.minimum((d // leg_len).astype(int), n_legs - 1)
    along = d - leg * leg_len
    x = np.where(leg % 2 == 0, along, leg_len - along)
    y = ys[leg]
    pts = np.column_stack([x, y])
    # rotate the pattern about the survey center
    ang = np.deg2rad(s.trajectory_angle_deg)
    c, si = np.cos(ang), np.sin(ang)
    ctr = np.array([ex / 2, ey / 2])
    dpt = pts - ctr
    pts = np.column_stack([c * dpt[:, 0] - si * dpt[:, 1],
                           si * dpt[:, 0] + c * dpt[:, 1]]) + ctr
    pts += rng.normal(0, 0.02, pts.shape)
    return pts


# world-to-camera rotation of a camera looking straight down (+z_cam into the
# seafloor, x_cam along +x_world)
R_DOWN = np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]])


def _camera_pose(xy, z, roll, tilt_axis, tilt_angle):
    R = rot_about_axis([0, 0, 1.0], roll) @ R_DOWN
    R = rot_about_axis(tilt_axis, tilt_angle) @ R
    center = np.array([xy[0], xy[1], z])
    return PoseSE3(rot_to_quat(R), -R @ center)


def _session_descriptors(cfg: SceneConfig, base_desc, delta, rng):
    """Drifted per-session landmark descriptors.

    The first `stable_dim` components persist across sessions; the appearance
    remainder is interpolated toward a session-specific random direction and
    renormalized, so delta=0 keeps descriptors identical and delta=1 replaces
    the appearance entirely.
    """
    sd = cfg.stable_dim
    out = base_desc.copy()
    if delta == 0.0:
        return out
    app = base_desc[:, sd:]
    norms = np.linalg.norm(app, axis=1, keepdims=True)
    direction = app / np.maximum(norms, 1e-12)
    rand = rng.normal(size=app.shape)
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    mix = (1 - delta) * direction + delta * rand
    mix /= np.maximum(np.linalg.norm(mix, axis=1, keepdims=True), 1e-12)
    out[:, sd:] = norms * mix
    return out


def render_observations(cfg: SceneConfig, pose, roll, positions, alive,
                        session_desc, base_orient, rng):
    """Keypoints of one camera: noisy projections of alive in-view landmarks
    plus clutter. Exposed for oracle tests; generate_scene uses it internally."""
    k = cfg.intrinsics
    ids = np.flatnonzero(alive)
    uv, z = project_many(positions[ids], pose, k)
    ok = (z > 0) & np.all(np.isfinite(uv), axis=1)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= k.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= k.height - 1)
    ids = ids[ok]
    uv = uv[ok]
    if cfg.pixel_noise > 0:
        uv = uv + rng.normal(0, cfg.pixel_noise, uv.shape)
        keep = (uv[:, 0] >= 0) & (uv[:, 0] <= k.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= k.height - 1)
        ids, uv = ids[keep], uv[keep]
    desc = session_desc[ids]
    if cfg.descriptor_noise > 0:
        desc = desc + rng.normal(0, cfg.descriptor_noise, desc.shape)
    desc = desc / np.maximum(np.linalg.norm(desc, axis=1, keepdims=True), 1e-12)
    orient = wrap_angle(base_orient[ids] + roll)

    n_clutter = int(round(cfg.clutter_fraction * len(ids)))
    if n_clutter:
        cuv = np.column_stack([rng.uniform(0, k.width - 1, n_clutter),
                               rng.uniform(0, k.height - 1, n_clutter)])
        cdesc = rng.normal(size=(n_clutter, cfg.descriptor_dim))
        cdesc /= np.linalg.norm(cdesc, axis=1, keepdims=True)
        corient = rng.uniform(0, 2 * np.pi, n_clutter)
        uv = np.vstack([uv, cuv])
        desc = np.vstack([desc, cdesc])
        orient = np.concatenate([orient, corient])
        ids = np.concatenate([ids, -np.ones(n_clutter, dtype=np.int64)])
    return Keypoints(uv, desc, orient, ids.astype(np.int64))


def generate_scene(cfg: SceneConfig, seed: int) -> SyntheticScene:
    """Sample landmarks, per-session states, trajectories and observations."""
    root = np.random.SeedSequence(seed)
    ss_field, ss_landmarks, ss_sessions = root.spawn(3)
    rng_field = np.random.default_rng(ss_field)
    rng_lm = np.random.default_rng(ss_landmarks)

    height = _height_field(cfg, rng_field)

    lo = -cfg.margin
    area = (cfg.extent_x + 2 * cfg.margin) * (cfg.extent_y + 2 * cfg.margin)
    n_lm = max(8, int(round(cfg.landmark_density * area)))
    xy = np.column_stack([
        rng_lm.uniform(lo, cfg.extent_x + cfg.margin, n_lm),
        rng_lm.uniform(lo, cfg.extent_y + cfg.margin, n_lm),
    ])
    positions = np.column_stack([xy, height(xy)])
    base_desc = rng_lm.normal(size=(n_lm, cfg.descriptor_dim))
    base_desc /= np.linalg.norm(base_desc, axis=1, keepdims=True)
    base_orient = rng_lm.uniform(0, 2 * np.pi, n_lm)

    alive, displacement, session_desc = {}, {}, {}
    images = []
    rejected = 0
    image_id = 0
    session_streams = ss_sessions.spawn(len(cfg.sessions))
    for s, ss in zip(cfg.sessions, session_streams):
        rng = np.random.default_rng(ss)
        alive[s.session_id] = rng.uniform(size=n_lm) < s.p_alive
        displacement[s.session_id] = (
            rng.normal(0, s.displacement_sigma, (n_lm, 3)) if s.displacement_sigma > 0
            else np.zeros((n_lm, 3))
        )
        session_desc[s.session_id] = _session_descriptors(cfg, base_desc, s.drift_magnitude, rng)

        waypoints = _lawnmower_positions(cfg, s, rng)
        pos_s = positions + displacement[s.session_id]
        for w in waypoints:
            z = s.altitude + rng.normal(0, s.altitude_jitter)
            roll = float(CANONICAL_ROLLS[rng.integers(4)]
                         + np.deg2rad(rng.uniform(-s.roll_jitter_deg, s.roll_jitter_deg)))
            tilt_axis = rng.normal(size=3)
            tilt_axis[2] = 0.0
            nrm = np.linalg.norm(tilt_axis)
            tilt_axis = tilt_axis / nrm if nrm > 0 else np.array([1.0, 0, 0])
            tilt = np.deg2rad(rng.normal(0, s.tilt_jitter_deg))
            pose = _camera_pose(w, z, roll, tilt_axis, tilt)
            kps = render_observations(cfg, pose, roll, pos_s, alive[s.session_id],
                                      session_desc[s.session_id], base_orient, rng)
            if len(kps) < cfg.min_keypoints:
                rejected += 1
                continue
            images.append(SurveyImage(image_id, s.session_id, pose, roll, kps))
            image_id += 1

    return SyntheticScene(cfg, seed, positions, base_desc, base_orient, alive,
                          displacement, session_desc, images, rejected)


# ---------------------------------------------------------------------------
# ground-truth annotations
# ---------------------------------------------------------------------------

def generate_annotations(scene: SyntheticScene, pairs_per_subset=10, pts_per_pair=6,
                         seed=0, overlap_min=0.3):
    """Cross-session evaluation pairs with exact ground-truth correspondences.

    Pairs are chosen spatially spread (greedy farthest-point over camera
    centers) among pairs whose ground-truth co-visibility ratio is at least
    `overlap_min`; annotated pixels are noise-free projections and therefore
    serve as the evaluation oracle.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    vis = {im.image_id: scene.visible_landmarks(im.image_id) for im in scene.images}
    session = scene.session_of()
    k = scene.intrinsics

    candidates = []
    imgs = scene.images
    for i in range(len(imgs)):
        for j in range(i + 1, len(imgs)):
            a, b = imgs[i].image_id, imgs[j].image_id
            if session[a] == session[b]:
                continue
            cov = vis[a] & vis[b]
            denom = min(len(vis[a]), len(vis[b]))
            if denom == 0:
                continue
            if len(cov) >= pts_per_pair and len(cov) / denom >= overlap_min:
                candidates.append((a, b, cov))
    if not candidates:
        raise InsufficientOverlap("no cross-session pair with sufficient overlap")

    centers = {im.image_id: im.pose.center() for im in imgs}
    chosen = []
    # start with the most co-visible pair, then maximize spatial spread
    order = sorted(range(len(candidates)), key=lambda idx: (-len(candidates[idx][2]), idx))
    chosen.append(candidates[order[0]])
    remaining = [candidates[idx] for idx in order[1:]]
    while remaining and len(chosen) < pairs_per_subset:
        def spread(c):
            mid = 0.5 * (centers[c[0]] + centers[c[1]])
            return min(np.linalg.norm(mid - 0.5 * (centers[p[0]] + centers[p[1]])) for p in chosen)
        best = max(range(len(remaining)), key=lambda idx: (spread(remaining[idx]), -idx))
        chosen.append(remaining.pop(best))

    pairs = []
    for a, b, cov in chosen:
        lm = np.array(sorted(cov))
        take = rng.choice(len(lm), size=min(pts_per_pair, len(lm)), replace=False)
        lm = np.sort(lm[take])
        qa, qb = [], []
        for lid in lm:
            pa, _ = project_many(scene.landmark_position(lid, session[a]), scene.image(a).pose, k)
            pb, _ = project_many(scene.landmark_position(lid, session[b]), scene.image(b).pose, k)
            qa.append(pa[0])
            qb.append(pb[0])
        pairs.append(AnnotatedPair(a, b, np.asarray(qa), np.asarray(qb), lm))
    return pairs


def save_annotations(pairs, path):
    with open(path, "w") as f:
        json.dump({"schema_version": 1, "pairs": [p.to_dict() for p in pairs]}, f,
                  separators=(",", ":"), sort_keys=True)


def load_annotations(path):
    with open(path) as f:
        d = json.load(f)
    return [AnnotatedPair.from_dict(p) for p in d["pairs"]]
