import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multisfm.geometry import PoseSE3, project_many, rot_about_axis
from multisfm.sfm import BundleConfig, Reconstruction, bundle_adjust
from multisfm.sfm.bundle import huber_cost, prune_observations
from multisfm.sfm.reconstruction import TRIANGULATED, UNTRIANGULATED, Track

from conftest import default_intrinsics


def make_recon(seed=0, n_cams=6, n_pts=80, pixel_noise=0.0):
    """Synthetic reconstruction with known-exact geometry: cameras on an arc
    above a shallow 3D point field, every point seen by every camera."""
    rng = np.random.default_rng(seed)
    k = default_intrinsics()
    pts = np.column_stack([rng.uniform(-1.2, 1.2, n_pts),
                           rng.uniform(-0.9, 0.9, n_pts),
                           rng.uniform(-0.15, 0.15, n_pts)])
    recon = Reconstruction(k, {i: 0 for i in range(n_cams)})
    for c in range(n_cams):
        angle = 0.15 * (c - n_cams / 2)
        R = rot_about_axis([0, 1.0, 0], angle)
        center = np.array([1.5 * np.sin(angle), 0.1 * c, -4.0])
        pose = PoseSE3.from_rt(R, -R @ center)
        recon.poses[c] = pose
    for tid in range(n_pts):
        obs, uvs = [], []
        for c in range(n_cams):
            uv, z = project_many(pts[tid], recon.poses[c], k)
            assert z[0] > 0
            obs.append((c, tid))
            uvs.append(uv[0] + rng.normal(0, pixel_noise, 2))
        recon.tracks[tid] = Track(tid, obs, np.array(uvs), pts[tid].copy(),
                                  TRIANGULATED)
    recon.gauge = {"fixed_image": 0}
    return recon, pts


def rms_residual(recon):
    errs = [e for _, _, e in recon.residuals()]
    return float(np.sqrt(np.mean(np.square(errs))))


class TestHuber:
    def test_quadratic_below_linear_above(self):
        d = 2.0
        assert np.isclose(huber_cost([1.0], d), 0.5)
        assert np.isclose(huber_cost([4.0], d), d * (4.0 - 0.5 * d))

    @given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=30),
           st.floats(0.1, 10.0), st.floats(0.0, 5.0))
    def test_monotone_in_error_magnitude(self, errs, delta, bump):
        base = huber_cost(errs, delta)
        bumped = huber_cost([errs[0] + bump] + errs[1:], delta)
        assert bumped >= base - 1e-12


class TestBundleAdjust:
    def test_perturb_and_recover_noise_free(self):
        recon, pts_gt = make_recon(seed=1)
        rng = np.random.default_rng(2)
        for c in list(recon.poses):
            if c == recon.gauge["fixed_image"]:
                continue
            recon.poses[c] = recon.poses[c].perturbed(rng.normal(0, 2e-3, 3),
                                                      rng.normal(0, 5e-3, 3))
        for t in recon.tracks.values():
            t.point = t.point + rng.normal(0, 5e-3, 3)
        assert rms_residual(recon) > 1.0
        trace = bundle_adjust(recon, BundleConfig(max_iterations=50))
        assert rms_residual(recon) < 1e-6

    def test_cost_trace_monotone_nonincreasing(self):
        recon, _ = make_recon(seed=3, pixel_noise=0.5)
        rng = np.random.default_rng(4)
        for c in list(recon.poses):
            if c == recon.gauge["fixed_image"]:
                continue
            recon.poses[c] = recon.poses[c].perturbed(rng.normal(0, 1e-3, 3),
                                                      rng.normal(0, 3e-3, 3))
        trace = bundle_adjust(recon, BundleConfig(max_iterations=25))
        costs = trace["costs"]
        assert len(costs) >= 2
        assert all(costs[i + 1] <= costs[i] + 1e-12 for i in range(len(costs) - 1))

    def test_gauge_camera_stays_fixed(self):
        recon, _ = make_recon(seed=5)
        fixed = recon.gauge["fixed_image"]
        q0, t0 = recon.poses[fixed].q.copy(), recon.poses[fixed].t.copy()
        rng = np.random.default_rng(6)
        for t in recon.tracks.values():
            t.point = t.point + rng.normal(0, 3e-3, 3)
        bundle_adjust(recon, BundleConfig(max_iterations=10))
        assert np.array_equal(recon.poses[fixed].q, q0)
        assert np.array_equal(recon.poses[fixed].t, t0)

    def test_free_images_window_only_moves_window(self):
        recon, _ = make_recon(seed=7)
        rng = np.random.default_rng(8)
        frozen = {c: (recon.poses[c].q.copy(), recon.poses[c].t.copy())
                  for c in recon.poses}
        for t in recon.tracks.values():
            t.point = t.point + rng.normal(0, 2e-3, 3)
        bundle_adjust(recon, BundleConfig(max_iterations=5), free_images=[4, 5])
        for c in recon.poses:
            if c in (4, 5):
                continue
            assert np.array_equal(recon.poses[c].q, frozen[c][0])
            assert np.array_equal(recon.poses[c].t, frozen[c][1])

    def test_robust_to_outlier_observations(self):
        recon, _ = make_recon(seed=9)
        # corrupt a handful of observations badly
        for tid in range(5):
            recon.tracks[tid].uv[2] += np.array([80.0, -60.0])
        rng = np.random.default_rng(10)
        for t in recon.tracks.values():
            t.point = t.point + rng.normal(0, 3e-3, 3)
        bundle_adjust(recon, BundleConfig(max_iterations=30))
        clean = [e for tid, _, e in recon.residuals() if tid >= 5]
        assert np.median(clean) < 0.05


class TestPrune:
    def test_prune_drops_bad_observations(self):
        recon, _ = make_recon(seed=11)
        recon.tracks[0].uv[1] += np.array([30.0, 0.0])
        removed = prune_observations(recon, threshold_px=4.0)
        assert removed == 1
        assert len(recon.tracks[0].obs) == 5

    def test_track_reverts_when_underconstrained(self):
        recon, _ = make_recon(seed=12, n_cams=2)
        recon.tracks[0].uv[1] += np.array([30.0, 0.0])
        prune_observations(recon, threshold_px=4.0)
        assert recon.tracks[0].state != TRIANGULATED
