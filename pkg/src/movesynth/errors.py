"""Exception hierarchy shared by every module."""


class MoveSynthError(Exception):
    """Base class for all package errors."""


class StructureError(MoveSynthError):
    """A task or sequence violates its structural invariants."""


class ShapeError(MoveSynthError, ValueError):
    pass


class LengthError(MoveSynthError, ValueError):
    pass


class OutOfFrameError(MoveSynthError):
    pass


class EmptyClipError(MoveSynthError):
    pass


class NoEligibleClipError(MoveSynthError):
    pass


class NonFiniteGradError(MoveSynthError, FloatingPointError):
    pass


class DegenerateSetError(MoveSynthError):
    pass


class EmptyError(MoveSynthError, ValueError):
    pass


class ConfigError(MoveSynthError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class CheckpointError(MoveSynthError):
    pass


class InputFormatError(MoveSynthError, ValueError):
    """An imported frame or keypoint file does not have the expected layout."""
