"""Exception types shared across the package."""


class PoseFieldError(Exception):
    """Base class for package errors."""


class SingularBlendError(PoseFieldError):
    """Blended skinning matrix too ill-conditioned to invert."""

    def __init__(self, point, cond):
        self.point = tuple(float(c) for c in point)
        self.cond = float(cond)
        super().__init__(
            f"blended transform near-singular at point {self.point} "
            f"(condition estimate {self.cond:.3e})"
        )


class DegenerateNormalError(PoseFieldError):
    """Normal network produced a vector too small to normalize."""


class EmptySurfaceError(PoseFieldError):
    """Scalar field has no zero crossing at the requested level."""


class DegenerateRayError(PoseFieldError):
    """Ray-parity test kept hitting edges/vertices after bounded retries."""


class ConfigError(PoseFieldError):
    """Invalid or inconsistent configuration value."""


class TrainingDiverged(PoseFieldError):
    """Loss went non-finite; carries the last good checkpoint path (or None)."""

    def __init__(self, message, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        super().__init__(message)
