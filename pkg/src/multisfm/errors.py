"""Exception types shared across the toolkit."""


class MultiSfmError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MultiSfmError):
    pass


class DegenerateGeometry(MultiSfmError):
    """Triangulation geometry too weak (e.g. near-zero baseline / parallax)."""


class NegativeDepth(MultiSfmError):
    """Cheirality violation: triangulated point behind one or more cameras."""


class NotEnoughInliers(MultiSfmError):
    """Robust estimation ended with fewer inliers than required."""


class DegenerateConfiguration(MultiSfmError):
    """Ill-conditioned linear system (e.g. coplanar PnP DLT)."""


class DegeneratePointSet(MultiSfmError):
    """Point set with insufficient rank for alignment."""


class InsufficientOverlap(MultiSfmError):
    """No cross-session image pair satisfies the overlap requirement."""


class EmptyImage(MultiSfmError):
    """Image without keypoints where at least one is required."""


class NoViablePair(MultiSfmError):
    """No seed pair qualifies for incremental reconstruction."""


class NumericalFailure(MultiSfmError):
    """Optimizer could not recover by damping; last good state is kept."""


class AlignmentFailed(MultiSfmError):
    """Post-hoc registration residual exceeded the configured bound."""


class ImageNotRegistered(MultiSfmError):
    pass
