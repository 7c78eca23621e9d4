"""Reprojection kernel dispatch.

Prefers the compiled Cython extension; falls back to the numpy implementation
when the extension is unavailable or MULTISFM_NO_EXT is set. Both backends
produce identical results (see tests/test_kernels.py and
benchmarks/bench_kernels.py).
"""
import os

from . import _reproj_np

if os.environ.get("MULTISFM_NO_EXT"):
    _impl = _reproj_np
    BACKEND = "numpy"
else:
    try:
        from . import _reproj_cy as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _reproj_np
        BACKEND = "numpy"


def reproj_residual_jacobian(Rs, ts, pts, cam_idx, pt_idx, uv, fx, fy, cx, cy):
    return _impl.reproj_residual_jacobian(Rs, ts, pts, cam_idx, pt_idx, uv, fx, fy, cx, cy)
