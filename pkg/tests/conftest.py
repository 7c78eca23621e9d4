import numpy as np
import pytest

from multisfm.geometry import CameraIntrinsics, PoseSE3, rot_about_axis
from multisfm.pipeline import PipelineConfig
from multisfm.simulator import generate_annotations, generate_scene


def tiny_pipeline_config(seed=11, **extra_overrides):
    """Small, fast scene configuration shared across the suite: a 1.2x1.2
    survey area with 3 sessions of 14 images each."""
    cfg = PipelineConfig(seed=seed, eval_pairs=4, eval_points=4)
    overrides = [
        "scene.extent_x=1.2",
        "scene.extent_y=1.2",
        "scene.sessions.0.n_images=14",
        "scene.sessions.1.n_images=14",
        "scene.sessions.2.n_images=14",
    ] + [f"{k}={v}" for k, v in extra_overrides.items()]
    return cfg.apply_overrides(overrides)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_pipeline_config()


@pytest.fixture(scope="session")
def tiny_scene(tiny_cfg):
    return generate_scene(tiny_cfg.scene, seed=101)


@pytest.fixture(scope="session")
def tiny_annotations(tiny_scene):
    return generate_annotations(tiny_scene, pairs_per_subset=4, pts_per_pair=4, seed=5)


@pytest.fixture(scope="session")
def tiny_joint(tiny_scene, tiny_cfg):
    """Joint hybrid reconstruction of the tiny scene (built once per run)."""
    from multisfm.pipeline import select_candidates
    from multisfm.matching import build_match_graph
    from multisfm.sfm import reconstruct_joint

    candidates, _ = select_candidates(tiny_scene, tiny_cfg.vpr_k, tiny_cfg.vpr_percentile)
    graph = build_match_graph(tiny_scene.images, candidates, tiny_cfg.matching,
                              tiny_scene.intrinsics, policy="hybrid_vpr")
    recon = reconstruct_joint(tiny_scene.images, graph, tiny_scene.intrinsics,
                              tiny_cfg.sfm)
    return graph, recon


def random_pose(rng, t_scale=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = rot_about_axis(axis, rng.uniform(0, np.pi))
    t = rng.normal(size=3) * t_scale
    return PoseSE3.from_rt(R, t)


def default_intrinsics():
    return CameraIntrinsics(fx=800.0, fy=800.0, cx=400.0, cy=300.0,
                            width=800, height=600)
