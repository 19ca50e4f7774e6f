"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the command line
can report failures as a single parsable line.
"""


class SplatError(Exception):
    code = "error"


class InvalidParameterError(SplatError, ValueError):
    code = "invalid_parameter"


class DegenerateGaussianError(SplatError, ValueError):
    code = "degenerate_gaussian"


class InvalidDepthError(SplatError, ValueError):
    code = "invalid_depth"


class DegeneratePlaneError(SplatError, ValueError):
    code = "degenerate_plane"


class DimensionMismatchError(SplatError, ValueError):
    code = "dimension_mismatch"


class EmptyRegionError(SplatError, ValueError):
    code = "empty_region"


class CapacityError(SplatError, MemoryError):
    code = "capacity_exceeded"


class DatasetError(SplatError):
    code = "dataset_error"


class MissingFileError(DatasetError, FileNotFoundError):
    code = "missing_file"


class MalformedCameraError(DatasetError, ValueError):
    code = "malformed_camera"


class FormatError(SplatError, ValueError):
    code = "format_error"


class OutputLockedError(SplatError):
    code = "output_locked"


class ConfigError(InvalidParameterError):
    code = "config_error"
