"""Exception taxonomy shared by all modules."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or otherwise invalid values."""


class StateError(RuntimeError):
    """An object was used in a state that does not permit the operation."""


class TrainingError(RuntimeError):
    """Optimization failed (divergence, exhausted data, ...)."""


class FormatError(ValueError):
    """A binary file failed structural or integrity validation."""


class ConfigError(ValueError):
    """An experiment configuration is malformed."""
