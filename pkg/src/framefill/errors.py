"""Exception types shared across the package.

Every contract violation raises a subclass of FramefillError so the CLI can
catch one base class and turn it into a one-line diagnostic with a nonzero
exit code. Plain ValueError/IndexError are reserved for argument mistakes that
are bugs in the caller rather than violations of a documented contract.
"""


class FramefillError(Exception):
    """Base class for all contract violations raised by this package."""


class GeometryError(FramefillError):
    """Array dimensions incompatible with the requested operation."""


class CapacityError(FramefillError):
    """Not enough data to fit the requested codebook."""


class ContractError(FramefillError):
    """A documented precondition was violated."""


class DomainError(FramefillError):
    """A scalar argument lies outside its documented domain."""


class SegmentationError(FramefillError):
    """Keyframe spacing incompatible with the trained clip length."""


class TrainingDivergedError(FramefillError):
    """Training loss became non-finite; carries the offending step."""


class FormatError(FramefillError):
    """A binary container failed validation (magic, version, or checksum)."""
