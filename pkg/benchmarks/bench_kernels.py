"""Benchmark the Cython reprojection kernel against the numpy fallback.

Checks agreement on random problems, then times both backends over a range
of observation counts. Run as: python3 benchmarks/bench_kernels.py
"""
import argparse
import time

import numpy as np

from multisfm._kernels import _reproj_np

try:
    from multisfm._kernels import _reproj_cy
except ImportError:
    _reproj_cy = None


def make_problem(rng, n_cams, n_pts, n_obs):
    # random proper rotations via QR
    A = rng.normal(size=(n_cams, 3, 3))
    Rs = np.linalg.qr(A)[0]
    Rs[np.linalg.det(Rs) < 0] *= -1
    ts = rng.normal(size=(n_cams, 3)) * 0.1
    ts[:, 2] += 4.0
    pts = rng.normal(size=(n_pts, 3))
    cam_idx = rng.integers(0, n_cams, size=n_obs)
    pt_idx = rng.integers(0, n_pts, size=n_obs)
    uv = rng.uniform(0, 800, size=(n_obs, 2))
    return (np.ascontiguousarray(Rs), np.ascontiguousarray(ts),
            np.ascontiguousarray(pts), cam_idx.astype(np.int64),
            pt_idx.astype(np.int64), np.ascontiguousarray(uv),
            800.0, 800.0, 400.0, 300.0)


def max_rel_diff(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def check_agreement(rng):
    worst = 0.0
    for _ in range(20):
        args = make_problem(rng, 8, 200, 2000)
        out_np = _reproj_np.reproj_residual_jacobian(*args)
        out_cy = _reproj_cy.reproj_residual_jacobian(*args)
        for a, b in zip(out_np, out_cy):
            worst = max(worst, max_rel_diff(np.asarray(a), np.asarray(b)))
    return worst


def bench(fn, args, repeats):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    if _reproj_cy is None:
        print("cython extension not built; benchmarking numpy backend only")
    else:
        worst = check_agreement(rng)
        print(f"max relative difference cython vs numpy: {worst:.3e}")
        assert worst < 1e-12, "backends disagree"

    print(f"{'n_obs':>10} {'numpy (ms)':>12} {'cython (ms)':>12} {'speedup':>8}")
    for n_obs in (1_000, 10_000, 100_000, 500_000):
        prob = make_problem(rng, max(4, n_obs // 200), max(50, n_obs // 10), n_obs)
        t_np = bench(_reproj_np.reproj_residual_jacobian, prob, args.repeats)
        if _reproj_cy is not None:
            t_cy = bench(_reproj_cy.reproj_residual_jacobian, prob, args.repeats)
            print(f"{n_obs:>10} {t_np * 1e3:>12.3f} {t_cy * 1e3:>12.3f} "
                  f"{t_np / t_cy:>8.2f}x")
        else:
            print(f"{n_obs:>10} {t_np * 1e3:>12.3f} {'-':>12} {'-':>8}")


if __name__ == "__main__":
    main()
