"""Exception hierarchy shared across the package.

Contract violations (bad shapes, broken preconditions) are distinct from
configuration problems so the CLI can map them to different exit codes.
"""


class SeedLabError(Exception):
    """Base class for all package errors."""


class ContractError(SeedLabError):
    """A documented precondition or invariant was violated."""


class ShapeError(ContractError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(SeedLabError):
    """Malformed or inconsistent configuration input."""


class CheckpointError(SeedLabError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class VersionError(CheckpointError):
    """Checkpoint format version not supported by this build."""


class TruncatedError(CheckpointError):
    """Checkpoint payload ends before the declared data."""
