"""Exception hierarchy shared across the package."""


class NeuralMCMCError(Exception):
    """Base class for all package errors."""


class ContractError(NeuralMCMCError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Array shapes do not line up."""


class ConvergenceError(NeuralMCMCError, RuntimeError):
    """An iterative solver or a sampler failed to converge."""


class EvaluationError(NeuralMCMCError, FloatingPointError):
    """A density or loss evaluation produced a non-finite value."""


class InitializationError(NeuralMCMCError, RuntimeError):
    """A chain could not be started from the prior."""


class CheckpointError(NeuralMCMCError, IOError):
    """A checkpoint or data file is corrupt, truncated or of the wrong version."""


class ConfigError(NeuralMCMCError, ValueError):
    """A run configuration is malformed or inconsistent."""
