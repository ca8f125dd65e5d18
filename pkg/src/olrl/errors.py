class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


class UsageError(RuntimeError):
    """An operation was called outside its precondition."""


class ParseError(ValueError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row
