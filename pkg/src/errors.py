"""
Exception hierarchy shared by every relaygrid module
"""


class RelayGridError(Exception):
    """Base class; main.py turns these into a one-line error report"""

    kind = "error"


class DimensionError(RelayGridError, ValueError):
    kind = "dimension"


class GeometryError(RelayGridError, ValueError):
    kind = "geometry"


class GradientStateError(RelayGridError, RuntimeError):
    kind = "gradient"


class VariantError(RelayGridError, ValueError):
    kind = "variant"


class ConfigError(RelayGridError, ValueError):
    kind = "config"


class CheckpointError(RelayGridError, ValueError):
    kind = "checkpoint"


class UndefinedMetricError(RelayGridError, ZeroDivisionError):
    kind = "metric"


class RasterError(RelayGridError, ValueError):
    kind = "raster"
