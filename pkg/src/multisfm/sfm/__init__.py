"""Incremental structure-from-motion: tracks, bundle adjustment, mapping."""
from .bundle import BundleConfig, bundle_adjust, huber_cost, prune_observations
from .incremental import (
    IncrementalMapper,
    SfmConfig,
    reconstruct_joint,
    reconstruct_per_session,
    select_seed_pair,
)
from .reconstruction import (
    MULTI_COLOR,
    RECON_SCHEMA_VERSION,
    REJECTED,
    SESSION_COLORS,
    TRIANGULATED,
    UNTRIANGULATED,
    Reconstruction,
    Track,
)
from .tracks import build_tracks

__all__ = [
    "BundleConfig", "bundle_adjust", "huber_cost", "prune_observations",
    "IncrementalMapper", "SfmConfig", "reconstruct_joint",
    "reconstruct_per_session", "select_seed_pair",
    "MULTI_COLOR", "RECON_SCHEMA_VERSION", "REJECTED", "SESSION_COLORS",
    "TRIANGULATED", "UNTRIANGULATED", "Reconstruction", "Track",
    "build_tracks",
]
