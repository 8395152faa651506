"""Exception hierarchy shared across the package."""


class QILCMError(Exception):
    """Base class for all package errors."""


class DimensionError(QILCMError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(QILCMError, ValueError):
    """An input lies outside the domain of an operation."""


class NonFiniteError(QILCMError, ValueError):
    """A tensor or gradient contains NaN or Inf."""


class ContractViolation(QILCMError, ValueError):
    """A documented precondition of a model component was violated."""


class ParseError(QILCMError, ValueError):
    def __init__(self, message: str, lineno: int | None = None, token: str | None = None):
        self.lineno = lineno
        self.token = token
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{message}")


class SchemaError(QILCMError, ValueError):
    """Data does not match the declared feature schema."""


class DataError(QILCMError, ValueError):
    """Missing or inconsistent data (qids, score counts, empty files)."""


class CheckpointError(QILCMError, ValueError):
    """A checkpoint document is unreadable or incompatible."""
