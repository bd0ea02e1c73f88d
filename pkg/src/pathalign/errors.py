"""Exception types shared across the package."""


class PathalignError(Exception):
    """Base class for all package errors."""


class DimensionError(PathalignError):
    """Shapes of the operands do not admit the requested operation."""


class DomainError(PathalignError):
    """Arguments are shape-compatible but outside the operation's domain."""


class ContractError(PathalignError):
    """A caller violated a documented precondition."""


class ConfigError(PathalignError):
    """A configuration value is missing, unknown, or out of range."""


class CheckpointError(PathalignError):
    """A checkpoint file is malformed or does not match the config."""


class TrainingDivergence(PathalignError):
    """A loss term became non-finite; message names the offending term."""
