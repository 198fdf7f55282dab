"""Exception types shared across the package."""


class AquaGraspError(Exception):
    """Base class for all package errors."""


# camera geometry
class NonConvergent(AquaGraspError):
    pass


class InvalidDepth(AquaGraspError, ValueError):
    pass


class BehindCamera(AquaGraspError):
    pass


class DimensionMismatch(AquaGraspError, ValueError):
    pass


class ConfigError(AquaGraspError):
    """A configuration or calibration document could not be parsed.

    ``key`` names the offending entry (dotted path) when one is known.
    """

    def __init__(self, message, key=None, path=None):
        self.key = key
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}: "
        if key is not None:
            prefix += f"[{key}] "
        super().__init__(prefix + message)


# simulator
class PlacementFailure(AquaGraspError):
    pass


class SimFault(AquaGraspError):
    """Non-finite simulator state. ``diagnostics`` holds a state snapshot."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# controller
class NoVisibleTarget(AquaGraspError):
    pass


class TargetDepthUnavailable(AquaGraspError):
    pass


# labeling
class NoClosureFound(AquaGraspError):
    pass


class SeedOutOfFrame(AquaGraspError):
    pass


class DegenerateAnchors(AquaGraspError, ValueError):
    pass


class ExportError(AquaGraspError, OSError):
    pass


# harness
class MissingFrameData(AquaGraspError):
    pass


class UnknownSuite(AquaGraspError, KeyError):
    def __str__(self):
        return Exception.__str__(self)
