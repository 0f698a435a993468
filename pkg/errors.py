"""Exception types shared across the exploration-reward engine.

Each error also derives from the closest builtin so callers can catch
``ValueError`` / ``ArithmeticError`` without importing this module.
"""


class ElementError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(ElementError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field

    def __reduce__(self):
        return type(self), (self.args[0], self.field)


class EmptyInput(ElementError, ValueError):
    pass


class DegenerateDistance(ElementError, ArithmeticError):
    pass


class NumericalFailure(ElementError, ArithmeticError):
    pass


class EmptyGraph(ElementError, LookupError):
    pass


class GraphFormatError(ElementError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(f"{message} (at byte {offset})" if offset is not None else message)
        self.message = message
        self.offset = offset

    # rebuilt from the raw parts so worker processes can send it back
    def __reduce__(self):
        return type(self), (self.message, self.offset)


class MazeParseError(ElementError, ValueError):
    def __init__(self, message, line=None, column=None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.message = message
        self.line = line
        self.column = column

    def __reduce__(self):
        return type(self), (self.message, self.line, self.column)


class ConfigError(ElementError):
    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.message = message
        self.field = field

    def __reduce__(self):
        return type(self), (self.message, self.field)
