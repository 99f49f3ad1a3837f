"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
training divergence exits 3, checkpoint/filesystem problems exit 4.
"""


class ContractViolationError(ValueError):
    """An operation was called with arguments violating its precondition."""


class ConfigurationError(ValueError):
    """A config value, spec field, or requested combination is invalid."""


class GenerationError(ConfigurationError):
    """A factor combination cannot be rendered inside the image frame."""


class IngestionError(ConfigurationError):
    """An external dataset archive does not match the expected layout."""


class DivergenceError(RuntimeError):
    """Training produced a NaN loss.

    Carries the last term breakdown (possibly containing the offending
    NaN values) for diagnosis.
    """

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


class CheckpointError(RuntimeError):
    """A checkpoint could not be saved or restored."""
