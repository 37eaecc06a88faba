"""Exception hierarchy shared by every module."""


class Conv4dNetError(Exception):
    """Base class for all library errors."""


class ShapeError(Conv4dNetError, ValueError):
    pass


class SizeError(Conv4dNetError, ValueError):
    pass


class AxisError(Conv4dNetError, ValueError):
    pass


class GeometryError(Conv4dNetError, ValueError):
    pass


class ConfigError(Conv4dNetError, ValueError):
    pass


class RangeError(Conv4dNetError, ValueError):
    pass


class SplitError(Conv4dNetError, ValueError):
    pass


class ParseError(Conv4dNetError, ValueError):
    """Malformed T4D file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
