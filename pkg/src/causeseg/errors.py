"""Exception hierarchy shared by the whole package.

The CLI maps these onto exit codes: ValidationError -> 2,
ArtifactIOError -> 3, NumericError -> 4.
"""


class CauseSegError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CauseSegError):
    """Inputs, configuration, or data violate a documented invariant."""


class DimensionError(ValidationError):
    """Array shapes or declared dimensions are inconsistent."""


class ArtifactIOError(CauseSegError):
    """A pipeline artifact on disk is unreadable or unwritable."""


class BadMagicError(ArtifactIOError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(ArtifactIOError):
    """File declares a format version this code does not speak."""


class TruncatedPayloadError(ArtifactIOError):
    """File ends before its declared payload does."""


class NumericError(CauseSegError):
    """Non-finite values or numerically degenerate inputs."""


class DegenerateGraphError(NumericError):
    """Affinity graph has no edges (e = 0), so modularity is undefined."""
