class FormatError(ValueError):
    """A file does not follow its expected on-disk format."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""
