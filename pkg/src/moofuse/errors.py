"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every error raised on purpose should
derive from one of the three families below.
"""


class MoofuseError(Exception):
    """Base class for all package errors."""


class ConfigError(MoofuseError, ValueError):
    """Invalid configuration values or schema violations."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(MoofuseError, ValueError):
    """Problems with input data, splits or sampling pools."""


class NumericError(MoofuseError, ArithmeticError):
    """Non-finite values or violated numerical contracts."""


class ShapeError(NumericError, ValueError):
    pass


class ContractError(NumericError, ValueError):
    pass


class DomainError(MoofuseError, ValueError):
    """An argument outside the mathematical domain of an operation."""


class RoutingError(ConfigError):
    pass


class PartitionError(NumericError):
    """A gradient landed in a parameter group it must never reach."""


class UnsupportedModeError(ConfigError):
    pass


class IngestionError(DataError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class SplitError(DataError):
    pass
