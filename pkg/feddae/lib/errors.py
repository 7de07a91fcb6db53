"""
Exception hierarchy for the FedDAE simulator.

The CLI maps ConfigurationError to exit code 2 and every other FedDaeError
to exit code 1.
"""


class FedDaeError(Exception):
    """Base class for all simulator errors."""


class ShapeMismatchError(FedDaeError, ValueError):
    """Input or tape dimensions do not match the network they are fed to."""


class PoisonedUpdateError(FedDaeError, ArithmeticError):
    """A loss or gradient tensor holds NaN/inf entries."""

    def __init__(self, tensor_name: str, detail: str = "") -> None:
        self.tensor_name = tensor_name
        message = f"Non-finite values in {tensor_name}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class ConfigurationError(FedDaeError, ValueError):
    """Invalid or infeasible run configuration."""

    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"{key}: {message}")


class IngestionError(FedDaeError):
    """Dataset file missing, unreadable or too malformed to use."""


class EvaluationError(FedDaeError):
    """Ranking request that violates the leave-one-out protocol."""


class UndefinedMetricError(EvaluationError):
    """Metric requested over an empty result set."""


class CheckpointError(FedDaeError):
    """Checkpoint missing, unreadable or incompatible with the dataset."""
