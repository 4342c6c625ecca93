"""Exception types raised across the toolkit."""


class CracknetError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(CracknetError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(DimensionError):
    """Spatial extents violate a divisibility or size requirement."""


class ConfigError(CracknetError, ValueError):
    """A configuration value is invalid."""


class ContractError(CracknetError, ValueError):
    """A documented precondition was violated by the caller."""


class GraphError(CracknetError, RuntimeError):
    """Misuse of the computation record (e.g. a second backward pass)."""


class FormatError(CracknetError, ValueError):
    """A serialized artifact is corrupt or does not match the model."""


class DataError(CracknetError):
    """Dataset files are missing or inconsistent.

    ``problems`` holds one human readable line per offending file.
    """

    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)


class NumericError(CracknetError, ArithmeticError):
    """A non-finite value appeared during training."""
