"""Exception hierarchy shared by all modules."""


class MapVaeError(Exception):
    pass


class ParseError(MapVaeError):
    """Malformed point-cloud or mesh file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateError(MapVaeError):
    """Input geometry cannot be scaled or sampled (zero extent, zero area)."""


class SizeError(MapVaeError):
    pass


class ConfigError(MapVaeError):
    pass


class NumericError(MapVaeError):
    """Non-finite value encountered during training."""
