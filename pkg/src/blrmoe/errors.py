"""Exception hierarchy shared by every module."""


class BlrMoeError(Exception):
    """Base class for all package errors."""


class ShapeError(BlrMoeError, ValueError):
    pass


class MaskingError(BlrMoeError, ValueError):
    """A softmax row had no finite entry."""


class RoutingError(BlrMoeError, IndexError):
    pass


class MaskError(BlrMoeError, ValueError):
    """An expert mask with no active entry."""


class ConfigurationError(BlrMoeError, ValueError):
    pass


class ConfigParseError(ConfigurationError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.field = field
        self.line = line


class InfeasibleAlignmentError(BlrMoeError, ValueError):
    """Target cannot be aligned to the available frames."""


class TrainingError(BlrMoeError, FloatingPointError):
    def __init__(self, message: str, param: str | None = None, step: int | None = None):
        super().__init__(message)
        self.param = param
        self.step = step


class InvariantViolation(BlrMoeError, AssertionError):
    pass
