class ConfigurationError(ValueError):
    """Inconsistent model, data or experiment configuration."""


class ConvergenceError(RuntimeError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
