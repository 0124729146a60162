"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file or byte stream does not conform to its declared format."""


class UnsupportedFormatError(FormatError):
    """The format is recognized but the codec/encoding is not supported."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateMaskError(ValueError):
    """An attention query row has no unmasked keys to attend to."""


class UndefinedMetricError(ArithmeticError):
    """A correlation metric is undefined for the given inputs (e.g. zero variance)."""
