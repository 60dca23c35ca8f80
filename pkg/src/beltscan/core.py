"""Grid containers, coordinate conventions and normal-map math.

Conventions used everywhere in this package:
  * x = column index, increasing rightward (the scan direction),
    y = row index, increasing downward; arrays are row-major (H, W, ...).
  * heights are in mm, slopes are dimensionless (mm per mm),
  * per-pixel normals follow n = (gx, gy, -1) / norm, so nz < 0 always,
  * heights are relative: integration recovers them up to a constant,
    which is normalized to zero mean.
"""

from typing import NamedTuple

import numpy as np

from .errors import EmptyMaskError, InvalidInputError


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class Pose2D(NamedTuple):
    """Planar translation of a frame in global scan coordinates, in px."""

    tx: float
    ty: float

    def __add__(self, other):
        return Pose2D(self.tx + other[0], self.ty + other[1])


class HeightField:
    """2-D scalar grid of surface heights in mm with a pixel pitch."""

    def __init__(self, data, pixel_pitch_mm):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or min(data.shape) < 1:
            raise InvalidInputError("height data must be a non-empty 2-D grid")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("height data must be finite")
        pixel_pitch_mm = float(pixel_pitch_mm)
        if not (pixel_pitch_mm > 0.0 and np.isfinite(pixel_pitch_mm)):
            raise InvalidInputError("pixel_pitch_mm must be positive")
        self._data = _frozen(data)
        self.pixel_pitch_mm = pixel_pitch_mm

    @property
    def data(self):
        return self._data

    @property
    def height(self):
        return self._data.shape[0]

    @property
    def width(self):
        return self._data.shape[1]


class GradientField:
    """Per-pixel surface slopes (gx, gy) = (dh/dx, dh/dy), dimensionless."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 2:
            raise InvalidInputError("gradient data must have shape (H, W, 2)")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("gradient data must be finite")
        self._data = _frozen(data)

    @property
    def data(self):
        return self._data

    @property
    def height(self):
        return self._data.shape[0]

    @property
    def width(self):
        return self._data.shape[1]

    @property
    def gx(self):
        return self._data[..., 0]

    @property
    def gy(self):
        return self._data[..., 1]


class NormalMap:
    """Per-pixel unit normals (nx, ny, nz) with nz < 0."""

    # f32 round-trips through the grid file format perturb norms by ~3e-7
    NORM_TOL = 1e-6

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidInputError("normal data must have shape (H, W, 3)")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("normal data must be finite")
        norms = np.linalg.norm(data, axis=-1)
        if np.any(np.abs(norms - 1.0) > self.NORM_TOL):
            raise InvalidInputError("normals must have unit norm")
        if np.any(data[..., 2] >= 0.0):
            raise InvalidInputError("normals must satisfy nz < 0")
        self._data = _frozen(data)

    @property
    def data(self):
        return self._data

    @property
    def height(self):
        return self._data.shape[0]

    @property
    def width(self):
        return self._data.shape[1]


class Mask:
    """Boolean validity grid matching the map it masks."""

    def __init__(self, data):
        data = np.asarray(data)
        if data.ndim != 2:
            raise InvalidInputError("mask data must be 2-D")
        self._data = _frozen(data.astype(bool))

    @property
    def data(self):
        return self._data

    @property
    def height(self):
        return self._data.shape[0]

    @property
    def width(self):
        return self._data.shape[1]

    def count(self):
        return int(np.count_nonzero(self._data))


class TactileFrame:
    """8-bit RGB tactile image with marker-band geometry and a timestamp.

    Marker bands are (x0, y0, x1, y1) pixel rectangles, exclusive on the
    far edge.  The left band hugs the top rows of the image, the right
    band the bottom rows; the central sensing region lies between them.
    """

    def __init__(self, rgb, frame_index, timestamp_s, marker_band_left,
                 marker_band_right):
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
            raise InvalidInputError("frame must be an (H, W, 3) uint8 image")
        h, w = rgb.shape[:2]
        for band in (marker_band_left, marker_band_right):
            x0, y0, x1, y1 = band
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise InvalidInputError("marker band outside the image")
        ly1 = marker_band_left[3]
        ry0 = marker_band_right[1]
        if ly1 > ry0:
            raise InvalidInputError("marker bands overlap the sensing region")
        self._rgb = _frozen(rgb)
        self.frame_index = int(frame_index)
        self.timestamp_s = float(timestamp_s)
        self.marker_band_left = tuple(int(v) for v in marker_band_left)
        self.marker_band_right = tuple(int(v) for v in marker_band_right)

    @property
    def rgb(self):
        return self._rgb

    @property
    def height(self):
        return self._rgb.shape[0]

    @property
    def width(self):
        return self._rgb.shape[1]

    def sensing_rows(self):
        """Row slice of the central sensing region (between the bands)."""
        return slice(self.marker_band_left[3], self.marker_band_right[1])


def normal_from_gradients(g):
    """Convert slopes to unit normals via n = (gx, gy, -1) / |...|."""
    if not isinstance(g, GradientField):
        g = GradientField(g)
    gx = g.data[..., 0]
    gy = g.data[..., 1]
    inv = 1.0 / np.sqrt(gx * gx + gy * gy + 1.0)
    return NormalMap(np.stack((gx * inv, gy * inv, -inv), axis=-1))


def gradients_from_normals(n):
    """Inverse of normal_from_gradients: (gx, gy) = (nx, ny) / (-nz)."""
    d = n.data if isinstance(n, NormalMap) else np.asarray(n, dtype=np.float64)
    denom = -d[..., 2]
    return GradientField(np.stack((d[..., 0] / denom, d[..., 1] / denom), axis=-1))


def mean_dot_product(pred, truth, mask):
    """Mean of pred . truth over masked pixels; 1 = aligned, -1 = opposite.

    Accepts NormalMap objects or raw (H, W, 3) arrays of unit vectors.
    """
    p = pred.data if hasattr(pred, "data") else np.asarray(pred)
    t = truth.data if hasattr(truth, "data") else np.asarray(truth)
    if p.shape != t.shape:
        raise InvalidInputError("normal map dimensions must match")
    sel = mask.data if hasattr(mask, "data") else np.asarray(mask, dtype=bool)
    if sel.shape != p.shape[:2]:
        raise InvalidInputError("mask dimensions must match the maps")
    if not sel.any():
        raise EmptyMaskError("mask selects no pixels")
    dots = np.einsum("ijk,ijk->ij", p, t)
    return float(dots[sel].mean())


def gradient_of(h):
    """Numerical slopes of a height field, in mm per mm.

    Central differences in the interior, one-sided at the borders.
    """
    if h.width < 3 or h.height < 3:
        raise InvalidInputError("grid must be at least 3x3 to differentiate")
    gy, gx = np.gradient(h.data, h.pixel_pitch_mm)
    return GradientField(np.stack((gx, gy), axis=-1))
