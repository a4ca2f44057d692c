"""Exception types shared across the toolkit."""


class VesselkitError(Exception):
    """Base class for all toolkit errors."""


class FormatError(VesselkitError):
    """Malformed file content (NIfTI header, checkpoint, manifest)."""


class UnsupportedTypeError(FormatError):
    """File uses a datatype the toolkit does not support."""


class RankError(VesselkitError):
    """Array rank differs from what the operation requires."""


class DomainError(VesselkitError):
    """Input values outside the operation's domain."""


class ScaleError(VesselkitError):
    """Filter scale too small for the voxel grid."""


class ShapeError(VesselkitError):
    """Incompatible array shapes or dimensions."""


class ConfigError(VesselkitError):
    """Invalid or inconsistent configuration."""


class SamplingError(VesselkitError):
    """Patch sampling could not satisfy its constraints."""


class IntegrityError(VesselkitError):
    """Stored data fails consistency checks (checkpoints, manifests)."""


class DivergenceError(VesselkitError):
    """Training produced a non-finite loss."""
