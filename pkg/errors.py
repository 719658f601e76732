"""
Exception hierarchy for the W2R2 lab.
Each class carries the exit code the CLI reports for it.
"""


class W2R2Error(Exception):
    exit_code = 1


class ConfigError(W2R2Error):
    """Bad or incompatible configuration, checkpoint or grid."""
    exit_code = 2


class DataIOError(W2R2Error):
    """Reading or writing an artifact failed."""
    exit_code = 3


class NumericError(W2R2Error):
    """A loss or forward value became non-finite."""
    exit_code = 4


class SweepFailure(W2R2Error):
    """Every cell of a sweep failed."""
    exit_code = 5


class ShapeError(W2R2Error, ValueError):
    pass


class GraphError(W2R2Error, RuntimeError):
    pass


class GeometryError(W2R2Error, ValueError):
    pass


class SceneGenerationError(W2R2Error, RuntimeError):
    pass


class LossError(W2R2Error, ValueError):
    pass


class ReportError(W2R2Error, ValueError):
    """A sweep or metrics CSV cannot be reported on."""
    exit_code = 3
