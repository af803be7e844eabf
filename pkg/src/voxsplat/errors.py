"""Exception types shared across the package."""


class VoxSplatError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(VoxSplatError, ValueError):
    pass


class DomainError(VoxSplatError, ValueError):
    pass


class ContractError(VoxSplatError, ValueError):
    """Shapes or call order do not match what the operation expects."""


class NumericError(VoxSplatError, FloatingPointError):
    pass


class DatasetError(VoxSplatError):
    """A dataset directory or file could not be parsed."""


class CheckpointError(VoxSplatError):
    """Checkpoint header, version or integrity check failed."""
