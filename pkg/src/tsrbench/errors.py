"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument or configuration value is outside its valid range."""


class DimensionError(ValueError):
    """Array shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition on the inputs of an operation was violated."""


class FormatError(ValueError):
    """A persisted file is malformed or inconsistent with its metadata."""


class GraphError(RuntimeError):
    """Misuse of a recorded differentiation graph."""


class TrainingError(RuntimeError):
    """Training diverged; ``epoch`` is the index of the offending epoch."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
