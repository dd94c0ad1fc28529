"""Exception hierarchy shared by every module."""


class McmFheError(Exception):
    """Base class for all package errors."""


class InvalidParams(McmFheError, ValueError):
    pass


class InsufficientPrimes(McmFheError):
    pass


class BasisMismatch(McmFheError, ValueError):
    pass


class DomainMismatch(McmFheError, ValueError):
    pass


class NotSquare(McmFheError, ValueError):
    pass


class InvalidPlan(McmFheError, ValueError):
    pass


class InvalidBlock(McmFheError, ValueError):
    pass


class InvalidShape(McmFheError, ValueError):
    pass


class PlacementMismatch(McmFheError, ValueError):
    pass


class InvalidConfig(McmFheError, ValueError):
    pass


class MalformedTrace(McmFheError, ValueError):
    pass


class CapacityExceeded(McmFheError):
    pass


class MissingConstant(McmFheError, KeyError):
    pass
