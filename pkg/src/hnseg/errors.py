"""Exception hierarchy shared by every pipeline stage."""


class HNSegError(Exception):
    """Base class; ``kind`` is the machine-readable tag the CLI reports."""

    kind = "error"


class FormatError(HNSegError):
    kind = "format"


class UnsupportedError(HNSegError):
    kind = "unsupported"


class OrientationError(HNSegError):
    kind = "orientation"


class ShapeError(HNSegError, ValueError):
    kind = "shape"


class ArgumentError(HNSegError, ValueError):
    kind = "argument"


class DetectionError(HNSegError):
    kind = "detection"


class NormalizationError(HNSegError):
    kind = "normalization"


class CaseError(HNSegError):
    kind = "case"


class ConfigError(HNSegError):
    kind = "config"


class StateError(HNSegError, RuntimeError):
    kind = "state"


class TrainingError(HNSegError, RuntimeError):
    kind = "training"
