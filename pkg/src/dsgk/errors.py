"""Exception hierarchy shared by every dsgk module."""


class DSGKError(Exception):
    """Base class for all errors raised by this package."""


class ZeroNorm(DSGKError, ValueError):
    pass


class DimensionMismatch(DSGKError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class Antipodal(DSGKError, ValueError):
    """Log map direction is undefined for (nearly) antipodal points."""


class BaseMismatch(DSGKError, ValueError):
    pass


class EmptyBatch(DSGKError, ValueError):
    pass


class NonPositiveKappa(DSGKError, ValueError):
    pass


class MissingLabels(DSGKError, ValueError):
    pass


class InsufficientClassSamples(DSGKError, ValueError):
    """A class has too few rows in one domain; skip it for this batch."""


class NoValidClasses(DSGKError, ValueError):
    pass


class RowNotNormalized(DSGKError, ValueError):
    pass


class InvalidSizes(DSGKError, ValueError):
    pass


class SingleSampleTrainingBatch(DSGKError, ValueError):
    pass


class StaleCache(DSGKError, RuntimeError):
    """Backward was called with a cache produced before the last parameter update."""


class TOutOfRange(DSGKError, ValueError):
    pass


class InvalidSpec(DSGKError, ValueError):
    pass


class ParseError(DSGKError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InconsistentWidth(ParseError):
    pass


class BatchTooLarge(DSGKError, ValueError):
    pass
