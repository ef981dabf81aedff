"""Exception types raised across the package."""


class InstflowError(Exception):
    """Base class for all errors raised by instflow."""


class DimensionError(InstflowError, ValueError):
    """Maps that must share a grid have different shapes."""


class BoundsError(InstflowError, IndexError):
    """A pixel coordinate lies outside its map."""


class MissingInstanceError(InstflowError, KeyError):
    """A local instance id is not present in an identity map."""


class MissingFlowError(InstflowError, KeyError):
    """A target instance has no flow for a requested reference frame."""


class SpecError(InstflowError, ValueError):
    """A synthetic scene or noise description is invalid."""


class MapFormatError(InstflowError, ValueError):
    """A map file has a malformed header or an unexpected dtype."""


class MapTruncatedError(MapFormatError):
    """A map file payload is shorter or longer than its header declares."""


class ManifestError(InstflowError, ValueError):
    """A sequence manifest is inconsistent or references missing files."""
