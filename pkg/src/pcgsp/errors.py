"""Exception types shared across the package."""


class PcgspError(Exception):
    """Base class for all package errors."""


class ParseError(PcgspError):
    """A point-cloud or graph file could not be parsed."""

    def __init__(self, msg, line=None):
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)
        self.line = line


class DegenerateGeometryError(PcgspError):
    """Neighborhood geometry does not define a normal (collinear or rank deficient)."""


class SolverError(PcgspError):
    """An iterative solver hit its iteration cap or broke down."""

    def __init__(self, msg, residual=None, lambda_min=None):
        super().__init__(msg)
        self.residual = residual
        self.lambda_min = lambda_min


class ContractError(PcgspError):
    """A documented precondition of an operation was violated."""


class ConfigError(PcgspError):
    """Configuration failed validation; ``path`` names the offending key."""

    def __init__(self, msg, path=None):
        if path:
            msg = f"{path}: {msg}"
        super().__init__(msg)
        self.path = path
