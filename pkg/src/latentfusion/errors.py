"""Exception types shared across the package."""


class FusionError(Exception):
    """Base class for all package errors."""


class ShapeError(FusionError, ValueError):
    """Operand dimensions do not agree."""


class ContractError(FusionError, RuntimeError):
    """A precondition between pipeline components was violated."""


class ParseError(FusionError, ValueError):
    """Malformed calibration or point-cloud input."""


class EmptyFrameError(FusionError, ValueError):
    """No LiDAR points survived range filtering."""
