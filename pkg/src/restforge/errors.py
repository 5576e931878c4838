"""Exception types shared across the package."""


class RestforgeError(Exception):
    """Base class for all package errors."""


class ShapeOutOfRange(RestforgeError):
    """A shape coefficient lies outside the allowed [-3, 3] interval."""


class DegenerateCapsule(RestforgeError):
    """A capsule produced zero voxels or non-positive dimensions."""


class SamplingBudgetExceeded(RestforgeError):
    """Rejection sampling did not accept within the attempt cap."""


class DegeneratePlane(RestforgeError):
    """The base particles under a sensing cell do not span a plane."""


class MatUnstable(RestforgeError):
    """Particle separation in the mat exceeded the stability bound."""


class IntegrationDiverged(RestforgeError):
    """Articulated dynamics produced joint speeds beyond the safe bound."""


class EmptyBody(RestforgeError):
    """Particlization produced no particles."""


class EmptyAfterClipping(RestforgeError):
    """No geometry left after clipping to the mat area / visibility."""


class DatasetError(RestforgeError):
    """Base class for dataset container faults."""


class VersionMismatch(DatasetError):
    """Container format version differs from the reader's."""


class CorruptOffset(DatasetError):
    """Record offsets point outside the file or the file is truncated."""


class HashMismatch(DatasetError):
    """Stored parameter hash does not match the params file in use."""
