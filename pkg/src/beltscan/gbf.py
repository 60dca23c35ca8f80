"""Grid binary format GBF1.

Layout: magic b"GBF1", u8 kind (0=height, 1=gradient, 2=normal, 3=mask),
u32le width, u32le height, f32le pixel_pitch_mm, then the row-major payload:
f32le interleaved channels (1, 2 or 3) for float grids, u8 for masks.
"""

import struct

import numpy as np

from .core import GradientField, HeightField, Mask, NormalMap
from .errors import InvalidInputError

MAGIC = b"GBF1"
KIND_HEIGHT = 0
KIND_GRADIENT = 1
KIND_NORMAL = 2
KIND_MASK = 3

_HEADER = struct.Struct("<4sBIIf")


def write_gbf1(path, grid, pixel_pitch_mm=None):
    """Write a grid object to `path`.

    `pixel_pitch_mm` is taken from the grid for height fields and defaults
    to 1.0 for the other kinds unless given explicitly.
    """
    if isinstance(grid, HeightField):
        kind, payload = KIND_HEIGHT, grid.data[..., None]
        pitch = grid.pixel_pitch_mm if pixel_pitch_mm is None else pixel_pitch_mm
    elif isinstance(grid, GradientField):
        kind, payload = KIND_GRADIENT, grid.data
        pitch = 1.0 if pixel_pitch_mm is None else pixel_pitch_mm
    elif isinstance(grid, NormalMap):
        kind, payload = KIND_NORMAL, grid.data
        pitch = 1.0 if pixel_pitch_mm is None else pixel_pitch_mm
    elif isinstance(grid, Mask):
        kind, payload = KIND_MASK, grid.data[..., None]
        pitch = 1.0 if pixel_pitch_mm is None else pixel_pitch_mm
    else:
        raise InvalidInputError(f"unsupported grid type {type(grid).__name__}")
    h, w = payload.shape[:2]
    header = _HEADER.pack(MAGIC, kind, w, h, float(pitch))
    if kind == KIND_MASK:
        body = np.ascontiguousarray(payload, dtype=np.uint8).tobytes()
    else:
        body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)


def read_gbf1(path):
    """Read a grid file and return the matching grid object."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated header")
    magic, kind, w, h, pitch = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    channels = {KIND_HEIGHT: 1, KIND_GRADIENT: 2, KIND_NORMAL: 3, KIND_MASK: 1}
    if kind not in channels:
        raise InvalidInputError(f"{path}: unknown grid kind {kind}")
    n = w * h * channels[kind]
    if kind == KIND_MASK:
        data = np.frombuffer(body, dtype=np.uint8, count=n).reshape(h, w)
        return Mask(data != 0)
    data = np.frombuffer(body, dtype="<f4", count=n).astype(np.float64)
    if kind == KIND_HEIGHT:
        return HeightField(data.reshape(h, w), pitch)
    if kind == KIND_GRADIENT:
        return GradientField(data.reshape(h, w, 2))
    # renormalize: f32 storage perturbs unit norms at the 1e-7 level
    vecs = data.reshape(h, w, 3)
    vecs /= np.linalg.norm(vecs, axis=-1, keepdims=True)
    return NormalMap(vecs)


def read_pixel_pitch(path):
    """Return just the pixel pitch recorded in a grid file header."""
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    _, _, _, _, pitch = _HEADER.unpack_from(raw)
    return float(pitch)
