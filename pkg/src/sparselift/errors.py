"""Shared exception hierarchy. The CLI maps these to exit code 1."""


class SparseliftError(Exception):
    """Base class for all errors raised by this package."""


class InvalidPoseError(SparseliftError):
    """A pose array has the wrong shape or non-finite entries."""


class ProjectionDomainError(SparseliftError):
    """A joint lies at or behind the camera plane."""

    def __init__(self, message, frame=None, joint=None):
        super().__init__(message)
        self.frame = frame
        self.joint = joint


class ScheduleError(SparseliftError):
    """A stride schedule violates its invariants."""


class AlignmentDegenerateError(SparseliftError):
    """Joint clouds are too degenerate (rank < 2) for Procrustes alignment."""


class CheckpointError(SparseliftError):
    """A checkpoint file is malformed or fails its integrity check."""


class DatasetError(SparseliftError):
    """A dataset file is malformed or inconsistent."""


class NonFiniteGradientError(SparseliftError):
    """A parameter gradient became NaN or infinite during training."""

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class ConfigError(SparseliftError):
    """A run configuration file is missing or invalid."""
