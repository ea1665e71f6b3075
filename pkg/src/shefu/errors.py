"""Exception hierarchy shared by every module."""


class ShefuError(Exception):
    pass


class ContractError(ShefuError, ValueError):
    """A caller violated an operation's precondition (shapes, ranges, ...)."""


class NumericInputError(ContractError):
    """NaN or Inf reached an operation that requires finite input."""


class PoolingUnderflowError(ContractError):
    pass


class ConfigError(ShefuError, ValueError):
    pass


class SamplingExhaustedError(ShefuError):
    """No donor region or instruction satisfied a negative-sampling rule."""


class ParseError(ShefuError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ShefuError):
    pass


class DivergenceError(ShefuError, FloatingPointError):
    pass


class ArtifactMismatchError(ShefuError):
    """A checkpoint does not fit the dataset or query it is applied to."""
