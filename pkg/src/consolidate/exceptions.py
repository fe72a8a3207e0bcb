"""Exception types raised across the package."""


class ConsolidateError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ConsolidateError, ValueError):
    """A layer received an input of the wrong shape."""

    def __init__(self, layer, expected, actual):
        self.layer = layer
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(
            f"{layer}: expected input shape {self.expected}, got {self.actual}"
        )


class NonFiniteError(ConsolidateError, FloatingPointError):
    """A loss, gradient or parameter became NaN or infinite.

    ``index`` is the offending batch, sample or parameter index, depending on
    where the value was detected (``kind`` says which).
    """

    def __init__(self, kind, index, detail=""):
        self.kind = kind
        self.index = index
        msg = f"non-finite value at {kind} {index}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class IDXFormatError(ConsolidateError, ValueError):
    """Base class for malformed IDX files."""


class BadMagicError(IDXFormatError):
    def __init__(self, path, magic, expected):
        self.path = path
        self.magic = magic
        self.expected = expected
        super().__init__(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected:08x}"
        )


class TruncatedFileError(IDXFormatError):
    def __init__(self, path, expected_bytes, actual_bytes):
        self.path = path
        super().__init__(
            f"{path}: truncated, expected {expected_bytes} bytes, found {actual_bytes}"
        )


class CountMismatchError(IDXFormatError):
    def __init__(self, n_images, n_labels):
        super().__init__(f"image/label count mismatch: {n_images} images, {n_labels} labels")


class MethodMismatchError(ConsolidateError, ValueError):
    """Two importance maps of different kind or length were combined."""


class UsageError(ConsolidateError, RuntimeError):
    """An API was called out of order (e.g. SI finish before begin)."""


class SchemaError(ConsolidateError, ValueError):
    """A results CSV does not match the expected schema."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
