"""Visual-LiDAR place recognition with adaptive modality weights."""

from adafusion.errors import FormatError, NumericError, ValidationError

__version__ = "0.1.0"

__all__ = ["FormatError", "NumericError", "ValidationError", "__version__"]
