"""Exception types shared across the package."""


class TrackDynError(Exception):
    """Base class; ``kind`` is the machine-readable error name used by the CLI."""

    @property
    def kind(self) -> str:
        return type(self).__name__


class NonFiniteState(TrackDynError, ArithmeticError):
    pass


class ControlError(TrackDynError, ValueError):
    """Invalid control log: out-of-range inputs, unordered timestamps, or a lookup before the first sample."""


class NearPiRotation(TrackDynError, ValueError):
    pass


class FactorEvaluationFailure(TrackDynError, RuntimeError):
    pass


class SolverFailure(TrackDynError, RuntimeError):
    pass


class OutOfOrderFrame(TrackDynError, ValueError):
    pass


class NotForwardMotion(TrackDynError, ValueError):
    pass


class EmptyAfterTrim(TrackDynError, ValueError):
    pass


class AlignmentFailure(TrackDynError, ValueError):
    pass


class SchemaError(TrackDynError, ValueError):
    pass


class FileError(TrackDynError, OSError):
    pass
