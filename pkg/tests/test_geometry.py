import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multisfm.errors import DegenerateGeometry, NotEnoughInliers
from multisfm.geometry import (
    PoseSE3,
    RansacConfig,
    Sim3Transform,
    estimate_relative_pose,
    project_many,
    quat_to_rot,
    rot_about_axis,
    rot_to_quat,
    so3_exp_quat,
    solve_pnp,
    triangulate_dlt,
    umeyama_align,
)

from conftest import default_intrinsics, random_pose

unit_axis = st.integers(0, 10**6).map(
    lambda s: np.random.default_rng(s).normal(size=3))


def _norm_axis(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-8 else np.array([1.0, 0, 0])


class TestRotations:
    @given(unit_axis, st.floats(-3.0, 3.0))
    def test_quat_rot_roundtrip(self, axis, angle):
        R = rot_about_axis(_norm_axis(axis), angle)
        assert np.allclose(quat_to_rot(rot_to_quat(R)), R, atol=1e-12)

    @given(unit_axis)
    def test_so3_exp_matches_axis_angle(self, w):
        q = so3_exp_quat(np.asarray(w) * 0.3)
        R = quat_to_rot(q)
        angle = np.linalg.norm(np.asarray(w) * 0.3)
        assert np.isclose(np.trace(R), 1 + 2 * np.cos(angle), atol=1e-10)

    def test_pose_compose_inverse(self):
        rng = np.random.default_rng(0)
        a, b = random_pose(rng), random_pose(rng)
        ab = a.compose(b)
        pts = rng.normal(size=(20, 3))
        assert np.allclose(ab.apply(pts), a.apply(b.apply(pts)), atol=1e-12)
        assert np.allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-12)

    def test_sim3_compose_inverse(self):
        rng = np.random.default_rng(1)
        T = Sim3Transform(1.7, rot_to_quat(rot_about_axis([0, 0, 1.0], 0.4)),
                          np.array([1.0, -2.0, 0.5]))
        pts = rng.normal(size=(10, 3))
        assert np.allclose(T.inverse().apply(T.apply(pts)), pts, atol=1e-10)
        assert np.allclose(T.compose(T.inverse()).apply(pts), pts, atol=1e-10)

    def test_sim3_map_pose_consistent_with_points(self):
        # projecting mapped points through the mapped pose reproduces pixels
        rng = np.random.default_rng(2)
        k = default_intrinsics()
        pose = PoseSE3.from_rt(np.eye(3), np.array([0.0, 0, 4.0]))
        T = Sim3Transform(2.0, rot_to_quat(rot_about_axis([0, 1.0, 0], 0.8)),
                          np.array([0.3, 0.1, -0.2]))
        pts = rng.normal(size=(30, 3))
        uv0, _ = project_many(pts, pose, k)
        uv1, _ = project_many(T.apply(pts), T.map_pose(pose), k)
        assert np.allclose(uv0, uv1, atol=1e-8)


class TestTriangulation:
    def test_exact_recovery(self):
        k = default_intrinsics()
        X = np.array([0.3, -0.2, 5.0])
        obs = []
        for tx in (-1.0, 0.0, 1.0):
            pose = PoseSE3.from_rt(np.eye(3), np.array([tx, 0, 0.0]))
            uv, _ = project_many(X, pose, k)
            obs.append((pose, k, uv[0]))
        Xh = triangulate_dlt(obs)
        assert np.allclose(Xh, X, atol=1e-9)

    def test_low_parallax_rejected(self):
        k = default_intrinsics()
        X = np.array([0.0, 0.0, 50.0])
        obs = []
        for tx in (0.0, 1e-4):
            pose = PoseSE3.from_rt(np.eye(3), np.array([tx, 0, 0.0]))
            uv, _ = project_many(X, pose, k)
            obs.append((pose, k, uv[0]))
        with pytest.raises(DegenerateGeometry):
            triangulate_dlt(obs, min_tri_angle_deg=1.5)


def _two_view_scene(rng, n=120, outlier_frac=0.0, relief=0.6):
    k = default_intrinsics()
    X = np.column_stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.0, 1.0, n),
                         rng.uniform(4.0, 4.0 + relief, n)])
    pose_a = PoseSE3.identity()
    pose_b = PoseSE3.from_rt(rot_about_axis([0, 1.0, 0], 0.12),
                             np.array([-0.8, 0.05, 0.1]))
    ua, _ = project_many(X, pose_a, k)
    ub, _ = project_many(X, pose_b, k)
    n_out = int(outlier_frac * n)
    if n_out:
        ub[:n_out] = rng.uniform([0, 0], [k.width, k.height], size=(n_out, 2))
    return k, X, pose_a, pose_b, ua, ub, n_out


class TestRelativePose:
    def test_recovers_pose_and_inliers(self):
        rng = np.random.default_rng(3)
        k, X, pa, pb, ua, ub, n_out = _two_view_scene(rng, outlier_frac=0.25)
        pose, mask = estimate_relative_pose(ua, ub, k, k, RansacConfig(seed=1))
        # ground-truth relative pose with unit baseline
        rel = pb.compose(pa.inverse())
        t_gt = rel.t / np.linalg.norm(rel.t)
        assert mask[:n_out].sum() <= 2          # outliers rejected
        assert mask[n_out:].mean() > 0.95       # inliers kept
        assert np.allclose(pose.R, rel.R, atol=5e-3)
        assert np.dot(pose.t, t_gt) > 1 - 5e-4  # direction agrees
        assert np.isclose(np.linalg.norm(pose.t), 1.0)

    def test_too_few_matches_raises(self):
        k = default_intrinsics()
        with pytest.raises(NotEnoughInliers):
            estimate_relative_pose(np.zeros((5, 2)), np.zeros((5, 2)), k, k)

    def test_deterministic_given_rng_seed(self):
        rng = np.random.default_rng(4)
        k, X, pa, pb, ua, ub, _ = _two_view_scene(rng, outlier_frac=0.2)
        out = []
        for _ in range(2):
            pose, mask = estimate_relative_pose(
                ua, ub, k, k, rng=np.random.default_rng(7))
            out.append((pose.q.copy(), pose.t.copy(), mask.copy()))
        assert np.array_equal(out[0][2], out[1][2])
        assert np.allclose(out[0][0], out[1][0]) and np.allclose(out[0][1], out[1][1])


class TestPnp:
    @pytest.mark.parametrize("planar", [False, True])
    def test_recovers_pose(self, planar):
        rng = np.random.default_rng(5)
        k = default_intrinsics()
        n = 80
        z = np.full(n, 5.0) if planar else rng.uniform(4.0, 6.0, n)
        X = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-1.5, 1.5, n), z])
        pose = PoseSE3.from_rt(rot_about_axis([0.2, 1.0, 0.1], 0.3),
                               np.array([0.2, -0.1, 0.4]))
        uv, _ = project_many(X, pose, k)
        n_out = 16
        uv_noisy = uv + rng.normal(0, 0.3, uv.shape)
        uv_noisy[:n_out] += rng.uniform(30, 120, (n_out, 2))
        est, mask = solve_pnp(X, uv_noisy, k, RansacConfig(seed=2))
        assert mask[n_out:].mean() > 0.9
        assert np.allclose(est.R, pose.R, atol=5e-3)
        assert np.allclose(est.t, pose.t, atol=2e-2)

    def test_too_few_raises(self):
        k = default_intrinsics()
        with pytest.raises(NotEnoughInliers):
            solve_pnp(np.zeros((5, 3)), np.zeros((5, 2)), k)


class TestUmeyama:
    @given(st.integers(0, 10**6), st.floats(0.2, 5.0))
    @settings(max_examples=30, deadline=None)
    def test_apply_then_recover(self, seed, scale):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(25, 3))
        T = Sim3Transform(scale, rot_to_quat(rot_about_axis(
            _norm_axis(rng.normal(size=3)), rng.uniform(0, np.pi))),
            rng.normal(size=3))
        est = umeyama_align(src, T.apply(src))
        assert np.isclose(est.scale, scale, rtol=1e-9)
        assert np.allclose(est.apply(src), T.apply(src), atol=1e-9)

    def test_rigid_mode_keeps_unit_scale(self):
        rng = np.random.default_rng(8)
        src = rng.normal(size=(20, 3))
        dst = 3.0 * src + 1.0
        est = umeyama_align(src, dst, with_scale=False)
        assert est.scale == 1.0
