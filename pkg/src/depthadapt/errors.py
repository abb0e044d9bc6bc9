"""Error classes shared across the package.

Each class carries the CLI exit code so the command-line layer can map
failures to its documented codes without string matching.
"""


class DepthAdaptError(Exception):
    exit_code = 1
    code = "internal-error"


class ConfigError(DepthAdaptError, ValueError):
    """Invalid configuration or invalid CLI usage.

    Also a ValueError so callers validating plain values can catch it
    generically.
    """

    exit_code = 2
    code = "config-error"


class DatasetError(DepthAdaptError):
    """Missing, corrupt, or inconsistent dataset files/manifests."""

    exit_code = 3
    code = "dataset-error"


class DivergenceError(DepthAdaptError):
    """Non-finite loss encountered during training."""

    exit_code = 4
    code = "divergence-error"

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class NumericError(DepthAdaptError):
    """Non-finite values fed to a numeric routine."""


class ShapeError(DepthAdaptError):
    """Tensor shape or kind mismatch."""


class EvalError(DepthAdaptError):
    """Evaluation protocol violation (empty mask, nonpositive depths, ...)."""


class CheckpointError(DepthAdaptError):
    """Checkpoint version mismatch or corruption."""
