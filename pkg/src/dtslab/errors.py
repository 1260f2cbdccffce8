"""Shared exception types."""


class DtsError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(DtsError):
    """An array argument has the wrong shape, dtype, or value range."""


class GraphError(DtsError):
    """A backward pass was requested on an invalid or foreign graph."""


class OptimError(DtsError):
    """Optimizer state and inputs disagree, or a gradient is unusable."""


class FormatError(DtsError):
    """A binary file does not match the expected on-disk layout."""


class ConfigError(DtsError):
    """A config file or CLI flag combination is invalid."""


class TrainingAborted(DtsError):
    """Training hit a non-finite loss and stopped.

    Carries enough context to point at the failing update.
    """

    def __init__(self, iteration: int, group: int, message: str = ""):
        self.iteration = iteration
        self.group = group
        detail = message or "non-finite loss"
        super().__init__(f"training aborted at iteration {iteration} (group {group}): {detail}")
