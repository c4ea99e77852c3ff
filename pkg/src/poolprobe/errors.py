"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A model or experiment configuration is inconsistent.

    ``fields`` lists the offending configuration keys.
    """

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)


class TrainingError(RuntimeError):
    """Training aborted because of a non-finite loss or gradient."""
