"""Exception types shared across the package."""


class MixedQError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MixedQError, ValueError):
    """An argument violates a documented precondition."""


class InvalidStateError(MixedQError, RuntimeError):
    """An operation was called before its required setup (e.g. calibration)."""


class ParseError(MixedQError, ValueError):
    """A serialized file could not be decoded."""
