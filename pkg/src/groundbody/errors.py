"""Exception types shared across the package."""


class GroundBodyError(Exception):
    """Base class for all package errors."""


class ParseError(GroundBodyError):
    pass


class InsufficientPoints(GroundBodyError):
    pass


class DegenerateGeometry(GroundBodyError):
    pass


class InvalidParams(GroundBodyError):
    pass


class UnorganizedCloud(GroundBodyError):
    pass


class ShapeError(GroundBodyError):
    pass


class DegenerateDataset(GroundBodyError):
    pass


class LengthMismatch(GroundBodyError):
    pass


class SingularKernel(GroundBodyError):
    pass


class ObjectiveError(GroundBodyError):
    """Raised when a BO objective evaluation fails; carries the offending plan."""

    def __init__(self, plan, cause):
        super().__init__(f"objective failed for plan {tuple(plan)}: {cause}")
        self.plan = tuple(plan)
        self.cause = cause


class StageError(GroundBodyError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
