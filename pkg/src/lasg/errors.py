"""Exception types raised by the simulator."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ParseError(ValueError):
    """Malformed dataset or config text."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(ArithmeticError):
    """A non-finite value appeared in a loss, gradient or iterate."""

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


class InvariantError(RuntimeError):
    """Engine bookkeeping disagrees with its brute-force counterpart."""
