"""Synthetic scan generation for the belt scanner.

Produces tactile frames (shaded contact patches with side marker bands)
from a known ground-truth height field, so the reconstruction pipeline can
be exercised and scored against exact geometry.  The shading model is a
simple per-pixel Lambertian: three colored lights, fixed directions, plus
ambient, optional motion blur along the scan axis and Gaussian pixel noise.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import (GradientField, HeightField, Mask, Pose2D, TactileFrame,
                   gradient_of, normal_from_gradients)
from .errors import InvalidInputError, OutOfBoundsError
from . import gbf

DEFAULT_INTERVALS = (8.0, 9.0, 11.0, 14.0, 10.0, 13.0)

# surface -> light unit vectors per channel (R, G, B); z < 0 points toward
# the camera side.  R illuminates from -x, B from +x, G from -y, all at 45
# degrees elevation.
_S2 = math.sqrt(0.5)
DEFAULT_LIGHT_DIRS = (
    (-_S2, 0.0, -_S2),
    (0.0, -_S2, -_S2),
    (_S2, 0.0, -_S2),
)


@dataclass(frozen=True)
class MarkerSpec:
    """Geometry of the two marker bands stamped on the belt edges."""

    band_height_px: int = 25
    dot_radius_px: float = 3.0
    intervals: tuple = DEFAULT_INTERVALS

    def __post_init__(self):
        if self.band_height_px < 1:
            raise InvalidInputError("band_height_px must be >= 1")
        if self.dot_radius_px <= 0:
            raise InvalidInputError("dot_radius_px must be > 0")
        iv = tuple(float(v) for v in self.intervals)
        if len(iv) < 1 or any(v <= 0 for v in iv):
            raise InvalidInputError("marker intervals must be positive")
        if len(set(iv)) < 2:
            raise InvalidInputError(
                "marker intervals need at least two distinct values "
                "(uniform spacing aliases in displacement matching)")
        object.__setattr__(self, "intervals", iv)

    @property
    def block_length_px(self):
        return float(sum(self.intervals))

    def to_dict(self):
        return {"band_height_px": self.band_height_px,
                "dot_radius_px": self.dot_radius_px,
                "intervals": list(self.intervals)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["band_height_px"], d["dot_radius_px"],
                   tuple(d["intervals"]))


@dataclass(frozen=True)
class SensorConfig:
    """Geometry, optics and noise of the simulated sensor."""

    sensing_width_mm: float = 60.0
    sensing_height_mm: float = 40.0
    pixel_pitch_mm: float = 0.1
    light_dirs: tuple = DEFAULT_LIGHT_DIRS
    ambient: tuple = (0.15, 0.15, 0.15)
    gain: tuple = (0.6, 0.6, 0.6)
    press_depth_mm: float = 1.0
    noise_sigma: float = 2.0
    blur_px_per_mm_s: float = 1.0
    marker_spec: MarkerSpec = field(default_factory=MarkerSpec)

    def __post_init__(self):
        if self.pixel_pitch_mm <= 0:
            raise InvalidInputError("pixel_pitch_mm must be > 0")
        if self.press_depth_mm <= 0:
            raise InvalidInputError("press_depth_mm must be > 0")
        dirs = np.asarray(self.light_dirs, dtype=np.float64)
        if dirs.shape != (3, 3):
            raise InvalidInputError("light_dirs must be three 3-vectors")
        if np.any(np.abs(np.linalg.norm(dirs, axis=1) - 1.0) > 1e-6):
            raise InvalidInputError("light directions must be unit vectors")
        if np.any(dirs[:, 2] >= 0):
            raise InvalidInputError(
                "light directions must have negative z (camera side)")
        object.__setattr__(self, "light_dirs",
                           tuple(tuple(v) for v in dirs))

    @property
    def frame_width_px(self):
        return int(round(self.sensing_width_mm / self.pixel_pitch_mm))

    @property
    def frame_height_px(self):
        return int(round(self.sensing_height_mm / self.pixel_pitch_mm))

    def band_regions(self):
        """(left, right) marker band rectangles as (x0, y0, x1, y1)."""
        w, h = self.frame_width_px, self.frame_height_px
        bh = self.marker_spec.band_height_px
        return (0, 0, w, bh), (0, h - bh, w, h)

    def sensing_region(self):
        """Rectangle between the bands, (x0, y0, x1, y1)."""
        w, h = self.frame_width_px, self.frame_height_px
        bh = self.marker_spec.band_height_px
        return (0, bh, w, h - bh)

    def to_dict(self):
        return {
            "sensing_width_mm": self.sensing_width_mm,
            "sensing_height_mm": self.sensing_height_mm,
            "pixel_pitch_mm": self.pixel_pitch_mm,
            "light_dirs": [list(v) for v in self.light_dirs],
            "ambient": list(self.ambient),
            "gain": list(self.gain),
            "press_depth_mm": self.press_depth_mm,
            "noise_sigma": self.noise_sigma,
            "blur_px_per_mm_s": self.blur_px_per_mm_s,
            "marker_spec": self.marker_spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["light_dirs"] = tuple(tuple(v) for v in d["light_dirs"])
        d["ambient"] = tuple(d["ambient"])
        d["gain"] = tuple(d["gain"])
        d["marker_spec"] = MarkerSpec.from_dict(d["marker_spec"])
        return cls(**d)


@dataclass(frozen=True)
class ScanTrajectory:
    """Ordered frame poses (px) plus the commanded speed and frame rate."""

    poses: tuple
    speed_mm_s: float
    fps: float
    jitter_sigma_px: float = 0.0

    def __post_init__(self):
        poses = tuple(Pose2D(float(p[0]), float(p[1])) for p in self.poses)
        if len(poses) < 1:
            raise InvalidInputError("trajectory needs at least one pose")
        if not all(np.isfinite(p.tx) and np.isfinite(p.ty) for p in poses):
            raise InvalidInputError("trajectory poses must be finite")
        if self.fps <= 0:
            raise InvalidInputError("fps must be > 0")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)


def make_trajectory(n_frames, speed_mm_s, fps, pixel_pitch_mm,
                    start_px=(0.0, 0.0), jitter_sigma_px=0.0, seed=0):
    """Constant-speed scan along +x with optional lateral (y) jitter.

    jitter_sigma_px = 0 models a robot-guided pass; > 0 models a manual
    pass where the operator wanders sideways frame to frame.
    """
    if n_frames < 1:
        raise InvalidInputError("n_frames must be >= 1")
    step = speed_mm_s / (fps * pixel_pitch_mm)
    rng = np.random.default_rng(seed)
    poses = []
    y = start_px[1]
    for i in range(n_frames):
        if i > 0 and jitter_sigma_px > 0:
            y += rng.normal(0.0, jitter_sigma_px)
        poses.append(Pose2D(start_px[0] + i * step, y))
    return ScanTrajectory(tuple(poses), float(speed_mm_s), float(fps),
                          float(jitter_sigma_px))


# ---------------------------------------------------------------------------
# surface factory

def _grid_mm(width_px, height_px, pixel_pitch_mm):
    xs = np.arange(width_px) * pixel_pitch_mm
    ys = np.arange(height_px) * pixel_pitch_mm
    return np.meshgrid(xs, ys)


def _surface_flat(w, h, pitch, params):
    return np.zeros((h, w))


def sphere_cap_height(x_mm, y_mm, center_mm, radius_mm, depth_mm):
    """Height of a pressed spherical cap, clipped at 0 outside contact."""
    if radius_mm <= 0:
        raise InvalidInputError("sphere radius must be > 0")
    if not (0 < depth_mm <= radius_mm):
        raise InvalidInputError("cap depth must be in (0, radius]")
    dx = x_mm - center_mm[0]
    dy = y_mm - center_mm[1]
    d2 = dx * dx + dy * dy
    inside = d2 < radius_mm ** 2
    z = np.zeros_like(d2)
    z[inside] = np.sqrt(radius_mm ** 2 - d2[inside]) - (radius_mm - depth_mm)
    return np.maximum(z, 0.0)


def sphere_cap_truth(width_px, height_px, pixel_pitch_mm, center_mm,
                     radius_mm, depth_mm, rim_margin_mm=0.0):
    """Analytic cap gradients plus the contact-circle mask.

    gx = -(x-cx)/sqrt(r^2-d^2), gy likewise; magnitude d/sqrt(r^2-d^2).
    """
    x, y = _grid_mm(width_px, height_px, pixel_pitch_mm)
    dx = x - center_mm[0]
    dy = y - center_mm[1]
    d2 = dx * dx + dy * dy
    contact_r = math.sqrt(2 * radius_mm * depth_mm - depth_mm ** 2)
    inside = d2 < max(contact_r - rim_margin_mm, 0.0) ** 2
    g = np.zeros((height_px, width_px, 2))
    denom = np.sqrt(np.maximum(radius_mm ** 2 - d2, 1e-12))
    g[..., 0] = np.where(inside, -dx / denom, 0.0)
    g[..., 1] = np.where(inside, -dy / denom, 0.0)
    return GradientField(g), Mask(inside)


def _surface_sphere_press(w, h, pitch, params):
    radius = params.get("radius_mm", 4.0)
    depth = params.get("depth_mm", 1.0)
    center = params.get("center_mm",
                        (w * pitch / 2.0, h * pitch / 2.0))
    x, y = _grid_mm(w, h, pitch)
    return sphere_cap_height(x, y, center, radius, depth)


_HEX_AXES = np.array([
    [math.cos(a), math.sin(a)] for a in (0.0, math.pi / 3, 2 * math.pi / 3)
])


def _hex_distance(dx, dy):
    """Across-flats hexagon distance: max projection on the three axes."""
    proj = np.abs(dx[..., None] * _HEX_AXES[:, 0] +
                  dy[..., None] * _HEX_AXES[:, 1])
    return proj.max(axis=-1), proj


def hex_pyramid_height(x_mm, y_mm, center_mm, across_flats_mm, slope_deg):
    apothem = across_flats_mm / 2.0
    if apothem <= 0:
        raise InvalidInputError("across_flats_mm must be > 0")
    if not (0 < slope_deg < 90):
        raise InvalidInputError("slope_deg must be in (0, 90)")
    d, _ = _hex_distance(x_mm - center_mm[0], y_mm - center_mm[1])
    return np.maximum((apothem - d) * math.tan(math.radians(slope_deg)), 0.0)


def hex_pyramid_truth(width_px, height_px, pixel_pitch_mm, center_mm,
                      across_flats_mm=6.0, slope_deg=30.0,
                      clip_depth_mm=None, crease_margin_mm=0.3):
    """Analytic face gradients of a hex pyramid plus a scoring mask.

    The mask keeps pixels strictly on a sloped face: above the base plane,
    below the press-plane clip (if any) and away from the radial creases
    where two faces meet, each by `crease_margin_mm`.
    """
    apothem = across_flats_mm / 2.0
    tan_s = math.tan(math.radians(slope_deg))
    x, y = _grid_mm(width_px, height_px, pixel_pitch_mm)
    dx = x - center_mm[0]
    dy = y - center_mm[1]
    d, proj = _hex_distance(dx, dy)
    h = np.maximum((apothem - d) * tan_s, 0.0)

    face = proj.argmax(axis=-1)
    axis_vec = _HEX_AXES[face]
    sign = np.sign(dx * axis_vec[..., 0] + dy * axis_vec[..., 1])
    sign[sign == 0] = 1.0
    g = np.zeros((height_px, width_px, 2))
    on_face = h > 0
    g[..., 0] = np.where(on_face, -tan_s * sign * axis_vec[..., 0], 0.0)
    g[..., 1] = np.where(on_face, -tan_s * sign * axis_vec[..., 1], 0.0)

    sorted_proj = np.sort(proj, axis=-1)
    crease_gap = sorted_proj[..., -1] - sorted_proj[..., -2]
    margin_h = crease_margin_mm * tan_s
    mask = (h > margin_h) & (crease_gap > crease_margin_mm)
    if clip_depth_mm is not None:
        mask &= h < (clip_depth_mm - margin_h)
    return GradientField(g), Mask(mask)


def _surface_hex_pyramid(w, h, pitch, params):
    across = params.get("across_flats_mm", 6.0)
    slope = params.get("slope_deg", 30.0)
    center = params.get("center_mm", (w * pitch / 2.0, h * pitch / 2.0))
    x, y = _grid_mm(w, h, pitch)
    return hex_pyramid_height(x, y, center, across, slope)


def _surface_sinusoid(w, h, pitch, params):
    amp = params.get("amplitude_mm", 0.2)
    px = params.get("period_x_mm", 8.0)
    py = params.get("period_y_mm", None)
    x, y = _grid_mm(w, h, pitch)
    z = amp * np.sin(2 * math.pi * x / px)
    if py is not None:
        z = z * np.sin(2 * math.pi * y / py)
    return z


def _surface_pcb_like(w, h, pitch, params):
    """Raised rectangular pads plus cylindrical via bumps, seeded layout."""
    seed = params.get("seed", 0)
    n_pads = params.get("n_pads", 12)
    n_vias = params.get("n_vias", 20)
    rng = np.random.default_rng(seed)
    z = np.zeros((h, w))
    x, y = _grid_mm(w, h, pitch)
    wm, hm = w * pitch, h * pitch
    for _ in range(n_pads):
        cx = rng.uniform(0.08, 0.92) * wm
        cy = rng.uniform(0.12, 0.88) * hm
        pw = rng.uniform(2.0, 6.0)
        ph = rng.uniform(1.5, 4.0)
        height = rng.uniform(0.1, 0.3)
        pad = (np.abs(x - cx) < pw / 2) & (np.abs(y - cy) < ph / 2)
        z[pad] = np.maximum(z[pad], height)
    for _ in range(n_vias):
        cx = rng.uniform(0.05, 0.95) * wm
        cy = rng.uniform(0.1, 0.9) * hm
        r = rng.uniform(0.3, 0.7)
        height = rng.uniform(0.1, 0.25)
        via = (x - cx) ** 2 + (y - cy) ** 2 < r * r
        z[via] = np.maximum(z[via], height)
    return z


def _surface_defect(w, h, pitch, params):
    """Shallow pits/scratches/steps cut into a flat plate."""
    x, y = _grid_mm(w, h, pitch)
    wm, hm = w * pitch, h * pitch
    features = params.get("features")
    if features is None:
        seed = params.get("seed", 0)
        n = params.get("n_features", 4)
        rng = np.random.default_rng(seed)
        features = []
        for _ in range(n):
            kind = rng.choice(["pit", "scratch"])
            features.append({
                "type": str(kind),
                "center_mm": (rng.uniform(0.15, 0.85) * wm,
                              rng.uniform(0.2, 0.8) * hm),
                "depth_mm": rng.uniform(0.05, 0.5),
                "sigma_mm": rng.uniform(0.5, 1.5),
                "length_mm": rng.uniform(3.0, 8.0),
                "angle_deg": rng.uniform(0, 180),
            })
    z = np.zeros((h, w))
    for f in features:
        cx, cy = f["center_mm"]
        depth = f["depth_mm"]
        if f["type"] == "pit":
            s = f.get("sigma_mm", 1.0)
            z -= depth * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
        elif f["type"] == "scratch":
            s = f.get("sigma_mm", 0.4)
            ln = f.get("length_mm", 5.0)
            a = math.radians(f.get("angle_deg", 0.0))
            u = (x - cx) * math.cos(a) + (y - cy) * math.sin(a)
            v = -(x - cx) * math.sin(a) + (y - cy) * math.cos(a)
            along = np.clip(np.abs(u) - ln / 2.0, 0.0, None)
            z -= depth * np.exp(-(along ** 2 + v ** 2) / (2 * s * s))
        elif f["type"] == "step":
            # sharp-edged recess: worst case for edge smoothing
            hw = f.get("half_width_mm", 2.0)
            z -= depth * (np.abs(x - cx) < hw) * (np.abs(y - cy) < hw)
        else:
            raise InvalidInputError(f"unknown defect feature {f['type']!r}")
    return z


_SURFACE_KINDS = {
    "flat": _surface_flat,
    "sphere_press": _surface_sphere_press,
    "hex_pyramid": _surface_hex_pyramid,
    "sinusoid": _surface_sinusoid,
    "pcb_like": _surface_pcb_like,
    "defect": _surface_defect,
}


def make_surface(kind, width_mm, height_mm, pixel_pitch_mm, **params):
    """Build a deterministic ground-truth surface of the given kind."""
    if kind not in _SURFACE_KINDS:
        raise InvalidInputError(
            f"unknown surface kind {kind!r}; expected one of "
            f"{sorted(_SURFACE_KINDS)}")
    w = int(round(width_mm / pixel_pitch_mm))
    h = int(round(height_mm / pixel_pitch_mm))
    if w < 3 or h < 3:
        raise InvalidInputError("surface must be at least 3x3 px")
    data = _SURFACE_KINDS[kind](w, h, pixel_pitch_mm, params)
    return HeightField(data, pixel_pitch_mm)


# ---------------------------------------------------------------------------
# contact and rendering

def imprint(surface, pose, cfg):
    """Contact patch seen by the sensor window at `pose`.

    The gel plane presses flat onto the surface: the patch is the surface
    height clipped at press_depth_mm, so features taller than the press
    depth plateau out.  Fractional poses sample bilinearly.
    """
    w, h = cfg.frame_width_px, cfg.frame_height_px
    tx, ty = float(pose[0]), float(pose[1])
    if not (0.0 <= tx <= surface.width - w and 0.0 <= ty <= surface.height - h):
        raise OutOfBoundsError(
            f"sensor window at ({tx:.1f}, {ty:.1f}) px exceeds the "
            f"{surface.width}x{surface.height} px surface")
    if tx == int(tx) and ty == int(ty):
        win = surface.data[int(ty):int(ty) + h, int(tx):int(tx) + w]
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        win = ndimage.map_coordinates(surface.data,
                                      [yy + ty, xx + tx], order=1)
    return HeightField(np.minimum(win, cfg.press_depth_mm),
                       surface.pixel_pitch_mm)


def shade(patch, cfg):
    """Lambertian RGB image of a contact patch, float in [0, 1].

    channel c = clamp(ambient_c + gain_c * max(0, n . light_c), 0, 1), with
    light_c the unit vector from the surface toward light c (z < 0, same
    side as the camera and the normals).
    """
    n = normal_from_gradients(gradient_of(patch)).data
    dirs = np.asarray(cfg.light_dirs)
    lam = np.maximum(np.einsum("ijk,ck->ijc", n, dirs), 0.0)
    img = np.asarray(cfg.ambient) + np.asarray(cfg.gain) * lam
    return np.clip(img, 0.0, 1.0)


def marker_positions(spec, width_px, phase_px, pad_px=0.0):
    """Dot center x-positions visible in [-pad, width+pad) at a belt phase.

    The aperiodic interval block tiles the (infinite) belt; advancing the
    phase slides the whole pattern left, exactly tracking belt travel.
    """
    block = np.asarray(spec.intervals)
    m = len(block)
    length = spec.block_length_px
    prefix = np.concatenate(([0.0], np.cumsum(block)[:-1]))
    lo = phase_px - pad_px
    hi = phase_px + width_px + pad_px
    k0 = math.floor(lo / length) * m
    out = []
    k = k0
    while True:
        pos = (k // m) * length + prefix[k % m]
        if pos >= hi:
            break
        if pos >= lo:
            out.append(pos - phase_px)
        k += 1
    return np.asarray(out)


def _stamp_dots(img, centers_x, center_y, radius):
    """Multiply anti-aliased black disks into a float RGB image."""
    h, w = img.shape[:2]
    r_out = radius + 0.5
    for cx in centers_x:
        x0 = max(int(math.floor(cx - r_out)), 0)
        x1 = min(int(math.ceil(cx + r_out)) + 1, w)
        y0 = max(int(math.floor(center_y - r_out)), 0)
        y1 = min(int(math.ceil(center_y + r_out)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.sqrt((xx - cx) ** 2 + (yy - center_y) ** 2)
        alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)
        img[y0:y1, x0:x1, :] *= (1.0 - alpha)[..., None]


def _blur_kernel(length_px):
    """Box kernel of fractional length; identity for lengths <= 1 px."""
    if length_px <= 1.0:
        return None
    n_full = int(math.floor(length_px))
    frac = length_px - n_full
    taps = np.ones(n_full + (2 if frac > 0 else 0))
    if frac > 0:
        taps[0] = taps[-1] = frac / 2.0
    return taps / taps.sum()


def render_frame(patch, cfg, speed_mm_s=0.0, seed=0, fps=10.0,
                 frame_index=0, timestamp_s=0.0, belt_phase_px=0.0,
                 with_markers=True):
    """Render one tactile frame; bit-deterministic given identical inputs.

    Motion blur is a 1-D box along the scan axis of length
    blur_px_per_mm_s * speed / fps; markers ride the belt, so their phase
    advances with accumulated travel.
    """
    img = shade(patch, cfg)
    left, right = cfg.band_regions()
    # the belt edge under the bands is opaque: it shows the flat belt
    # color, not the surface underneath
    flat_color = np.clip(np.asarray(cfg.ambient) +
                         np.asarray(cfg.gain) *
                         (-np.asarray(cfg.light_dirs)[:, 2]), 0.0, 1.0)
    img[left[1]:left[3], :, :] = flat_color
    img[right[1]:right[3], :, :] = flat_color
    if with_markers:
        spec = cfg.marker_spec
        xs = marker_positions(spec, cfg.frame_width_px, belt_phase_px,
                              pad_px=spec.dot_radius_px + 1)
        _stamp_dots(img, xs, (left[1] + left[3] - 1) / 2.0,
                    spec.dot_radius_px)
        _stamp_dots(img, xs, (right[1] + right[3] - 1) / 2.0,
                    spec.dot_radius_px)
    kernel = _blur_kernel(cfg.blur_px_per_mm_s * speed_mm_s / fps)
    if kernel is not None:
        img = ndimage.convolve1d(img, kernel, axis=1, mode="nearest")
    counts = img * 255.0
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        counts = counts + rng.normal(0.0, cfg.noise_sigma, counts.shape)
    rgb = np.clip(np.rint(counts), 0, 255).astype(np.uint8)
    return TactileFrame(rgb, frame_index, timestamp_s, left, right)


def render_background(cfg):
    """Noise-free, marker-free frame of a flat (no contact) patch."""
    flat = HeightField(
        np.zeros((cfg.frame_height_px, cfg.frame_width_px)),
        cfg.pixel_pitch_mm)
    img = shade(flat, cfg)
    rgb = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    left, right = cfg.band_regions()
    return TactileFrame(rgb, -1, 0.0, left, right)


@dataclass
class ScanResult:
    """Frames plus everything needed to score a reconstruction."""

    surface: HeightField
    cfg: SensorConfig
    trajectory: ScanTrajectory
    frames: list
    poses_px: list
    seed: int

    def true_patch(self, i):
        return imprint(self.surface, self.poses_px[i], self.cfg)

    def true_normals(self, i):
        return normal_from_gradients(gradient_of(self.true_patch(i)))

    def clipped_surface(self):
        """The whole surface after press clipping (what any frame can see)."""
        return HeightField(
            np.minimum(self.surface.data, self.cfg.press_depth_mm),
            self.surface.pixel_pitch_mm)

    def true_global_normals(self):
        return normal_from_gradients(gradient_of(self.clipped_surface()))


def simulate_scan(surface, trajectory, cfg, seed=0):
    """Render an ordered frame sequence along a trajectory.

    Per-frame noise streams are spawned from the scan seed, so frames are
    independent of render order; belt phase accumulates the x-travel since
    the first pose (no belt slip is modeled).
    """
    poses = list(trajectory.poses)
    if len(poses) > 1:
        # pose deltas must be consistent with the commanded speed, up to
        # the lateral jitter allowance
        step = trajectory.speed_mm_s / (trajectory.fps * cfg.pixel_pitch_mm)
        jitter = 6.0 * trajectory.jitter_sigma_px + 1.0
        for a, b in zip(poses, poses[1:]):
            if abs((b.tx - a.tx) - step) > 0.25 * step + 1.0 or \
                    abs(b.ty - a.ty) > jitter:
                raise InvalidInputError(
                    f"pose delta ({b.tx - a.tx:.2f}, {b.ty - a.ty:.2f}) px "
                    f"inconsistent with {step:.2f} px per frame")
    children = np.random.SeedSequence(seed).spawn(len(trajectory))
    frames = []
    t0 = poses[0]
    for i, pose in enumerate(poses):
        patch = imprint(surface, pose, cfg)
        frames.append(render_frame(
            patch, cfg, speed_mm_s=trajectory.speed_mm_s, seed=children[i],
            fps=trajectory.fps, frame_index=i,
            timestamp_s=i / trajectory.fps,
            belt_phase_px=pose.tx - t0.tx))
    return ScanResult(surface, cfg, trajectory, frames, poses, seed)


# ---------------------------------------------------------------------------
# scan directory format

def save_png(path, rgb):
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _atomic_write_text(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def write_scan_dir(path, result):
    """frame_%06d.png + scan.json + ground-truth gbf1 grids."""
    os.makedirs(path, exist_ok=True)
    for i, frame in enumerate(result.frames):
        save_png(os.path.join(path, f"frame_{i:06d}.png"), frame.rgb)
    meta = {
        "format": "beltscan-scan-v1",
        "pixel_pitch_mm": result.cfg.pixel_pitch_mm,
        "fps": result.trajectory.fps,
        "speed_mm_s": result.trajectory.speed_mm_s,
        "jitter_sigma_px": result.trajectory.jitter_sigma_px,
        "seed": result.seed,
        "sensor": result.cfg.to_dict(),
        "trajectory_px": [[p.tx, p.ty] for p in result.poses_px],
    }
    _atomic_write_text(os.path.join(path, "scan.json"),
                       json.dumps(meta, indent=2, sort_keys=True))
    clipped = result.clipped_surface()
    gbf.write_gbf1(os.path.join(path, "truth_height.gbf1"), clipped)
    gbf.write_gbf1(os.path.join(path, "truth_normals.gbf1"),
                   result.true_global_normals(),
                   pixel_pitch_mm=clipped.pixel_pitch_mm)


def load_scan_dir(path):
    """Return (frames, cfg, trajectory, meta) from a scan directory."""
    with open(os.path.join(path, "scan.json")) as f:
        meta = json.load(f)
    cfg = SensorConfig.from_dict(meta["sensor"])
    poses = tuple(Pose2D(*p) for p in meta["trajectory_px"])
    trajectory = ScanTrajectory(poses, meta["speed_mm_s"], meta["fps"],
                                meta.get("jitter_sigma_px", 0.0))
    left, right = cfg.band_regions()
    frames = []
    for i in range(len(poses)):
        rgb = load_png(os.path.join(path, f"frame_{i:06d}.png"))
        frames.append(TactileFrame(rgb, i, i / meta["fps"], left, right))
    return frames, cfg, trajectory, meta
