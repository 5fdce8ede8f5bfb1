"""Exception types shared across the pipeline."""


class SympCamError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(SympCamError, ValueError):
    """A configuration violates its documented invariants."""


class SessionLoadError(SympCamError, FileNotFoundError):
    """A file required by the session layout is missing or unreadable."""


class IntegrityError(SympCamError, ValueError):
    """Recorded streams disagree with each other (durations, markers)."""


class InsufficientDataError(SympCamError, ValueError):
    """Not enough samples/pairs/peaks for the requested statistic."""


class FaceDetectionError(SympCamError, RuntimeError):
    """No face was found and no fallback box was provided."""


class ResampleError(SympCamError, ValueError):
    pass


class AlignmentError(SympCamError, ValueError):
    pass


class UndefinedCorrelationError(SympCamError, ValueError):
    """Rank correlation is undefined because an input has zero rank variance."""


class DecompositionError(SympCamError, RuntimeError):
    """The EDA decomposition QP failed to converge."""


class DomainError(SympCamError, ValueError):
    pass


class ProtocolError(SympCamError, ValueError):
    """A session does not follow the rest/pinch study protocol."""


class TrainingError(SympCamError, RuntimeError):
    pass


class LeakageError(SympCamError, AssertionError):
    """A test-participant sample reached a training batch."""
