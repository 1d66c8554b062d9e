"""Exception types shared across the package.

The CLI maps ConfigError to exit code 1 (user/configuration problem) and
anything else to exit code 2 (internal error).
"""


class ConfigError(ValueError):
    """Invalid configuration, dataset layout, or user input."""


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss.

    Carries enough context to reproduce the failing batch.
    """

    def __init__(self, message, batch_ids=None, lam=None, learning_rate=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids) if batch_ids is not None else []
        self.lam = lam
        self.learning_rate = learning_rate
