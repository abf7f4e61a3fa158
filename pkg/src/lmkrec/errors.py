"""Exception hierarchy shared by every stage of the engine."""


class LmkError(Exception):
    """Base class for all engine errors."""


class FormatError(LmkError):
    """Bad magic, version or structure in a descriptor file."""


class TruncationError(FormatError):
    """File ends before the payload its header declares."""


class IntegrityError(LmkError):
    """Inconsistent ids, labels or alignment between inputs."""


class IoError(LmkError, OSError):
    """Filesystem failure while reading or writing an artifact."""


class EmptySetError(LmkError, ValueError):
    pass


class ZeroVectorError(LmkError, ValueError):
    def __init__(self, message, item_id=None):
        super().__init__(message)
        self.item_id = item_id


class ParamError(LmkError, ValueError):
    pass


class NormError(LmkError, ValueError):
    """Input expected to be unit-normalized is not."""


class DegenerateLabelError(LmkError, ValueError):
    pass


class UndefinedMetricError(LmkError, ValueError):
    pass


class GenerationError(LmkError):
    """Synthetic dataset constraints cannot be met."""
