"""Shared exception types."""


class PanalignError(Exception):
    pass


class InvalidShapeError(PanalignError, ValueError):
    """Operand shapes are incompatible; message names both shapes."""


class InvalidLabelError(PanalignError, ValueError):
    """Class label outside [0, K)."""


class InvalidArgumentError(PanalignError, ValueError):
    """Argument outside its documented domain."""


class DataError(PanalignError, ValueError):
    """Malformed corpus, manifest or binary file."""
