"""Exception hierarchy.

The CLI maps the three families to exit codes: configuration problems
exit 2, data problems exit 3, numeric failures exit 4.
"""


class CometError(Exception):
    pass


class ConfigError(CometError, ValueError):
    """Invalid configuration or invalid call parameters."""


class ParameterError(ConfigError):
    pass


class DataError(CometError, ValueError):
    """Problems with dataset contents, splits or files."""


class DimensionError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class SpecError(DataError):
    """A split specification that does not fit the dataset."""


class StratificationError(DataError):
    pass


class DatasetFormatError(DataError):
    pass


class NumericError(CometError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(NumericError):
    pass


class ContractError(CometError, RuntimeError):
    """Caller violated an API precondition (e.g. non-scalar loss)."""
