"""Belt scanner simulation and surface reconstruction toolkit."""

from .core import (GradientField, HeightField, Mask, NormalMap, Pose2D,
                   TactileFrame, gradient_of, gradients_from_normals,
                   mean_dot_product, normal_from_gradients)
from .errors import (AmbiguousMatchError, BeltScanError, DegenerateInputError,
                     DivergenceError, EmptyMaskError, InsufficientDataError,
                     InvalidInputError, OutOfBoundsError,
                     UnsupportedRegionError)

__version__ = "0.1.0"

__all__ = [
    "GradientField", "HeightField", "Mask", "NormalMap", "Pose2D",
    "TactileFrame", "gradient_of", "gradients_from_normals",
    "mean_dot_product", "normal_from_gradients",
    "BeltScanError", "InvalidInputError", "EmptyMaskError",
    "OutOfBoundsError", "AmbiguousMatchError", "InsufficientDataError",
    "DivergenceError", "UnsupportedRegionError", "DegenerateInputError",
    "__version__",
]
