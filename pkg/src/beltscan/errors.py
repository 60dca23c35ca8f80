"""Exception types shared across the scanner pipeline."""


class BeltScanError(Exception):
    """Base class for all pipeline errors."""


class InvalidInputError(BeltScanError, ValueError):
    """Input violates a documented precondition (shape, range, finiteness)."""


class EmptyMaskError(BeltScanError, ValueError):
    """A reduction over a mask was requested but the mask selects no pixels."""


class OutOfBoundsError(BeltScanError, ValueError):
    """A sensor window or sample location falls outside the surface."""


class AmbiguousMatchError(BeltScanError, RuntimeError):
    """Marker pattern matching found two near-equal candidate alignments."""


class InsufficientDataError(BeltScanError, ValueError):
    """Not enough detections/samples to run the requested estimator."""


class DivergenceError(BeltScanError, RuntimeError):
    """Training produced a non-finite loss."""


class UnsupportedRegionError(BeltScanError, ValueError):
    """Integration mask is not a filled rectangle."""


class DegenerateInputError(BeltScanError, ValueError):
    """Geometry is degenerate (collinear points, singular structure tensor)."""
