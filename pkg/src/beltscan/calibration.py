"""Photometric calibration: sphere presses to gradient regressor.

A small metal ball is pressed at a grid of locations over the sensing
area; pixels inside each (analytically known) contact circle pair the
observed color with the exact cap slope at that pixel.  A small dense
network maps per-pixel (R, G, B, X, Y) features to (gx, gy).
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .core import GradientField, Mask
from .errors import InvalidInputError, OutOfBoundsError
from .mlp import MLP, TrainConfig, split_indices
from .simulator import (HeightField, render_background, render_frame,
                        sphere_cap_height, sphere_cap_truth, _grid_mm)

MODEL_SCHEMA = "beltscan-gradient-regressor-v1"
DEFAULT_HIDDEN = (128, 32, 32)


@dataclass(frozen=True)
class CalibrationSample:
    """One labeled pixel: color + normalized position -> target slopes."""

    r: float
    g: float
    b: float
    x: float
    y: float
    gx: float
    gy: float


def features_from_frame(frame_rgb, background_rgb):
    """Per-pixel (R, G, B, X, Y) features in [0, 1].

    Colors are background-subtracted differences remapped by (d + 1) / 2;
    X, Y are pixel coordinates normalized by width and height.
    """
    diff = (frame_rgb.astype(np.float64) -
            background_rgb.astype(np.float64)) / 255.0
    color = (diff + 1.0) / 2.0
    h, w = frame_rgb.shape[:2]
    xs = (np.arange(w) / w)[None, :].repeat(h, axis=0)
    ys = (np.arange(h) / h)[:, None].repeat(w, axis=1)
    return np.concatenate([color, xs[..., None], ys[..., None]], axis=-1)


def calibration_grid_locations(cfg, rows=13, cols=11, ball_radius_mm=4.0,
                               depth_mm=None):
    """Press centers (mm) covering the sensing region, inset so each
    contact circle stays inside it."""
    depth = cfg.press_depth_mm if depth_mm is None else depth_mm
    contact_r = math.sqrt(2 * ball_radius_mm * depth - depth ** 2)
    x0, y0, x1, y1 = cfg.sensing_region()
    pitch = cfg.pixel_pitch_mm
    margin = contact_r + 2 * pitch
    lo_x, hi_x = x0 * pitch + margin, x1 * pitch - margin
    lo_y, hi_y = y0 * pitch + margin, y1 * pitch - margin
    if lo_x >= hi_x or lo_y >= hi_y:
        raise OutOfBoundsError("ball does not fit inside the sensing region")
    xs = np.linspace(lo_x, hi_x, rows)
    ys = np.linspace(lo_y, hi_y, cols)
    return [(float(x), float(y)) for x in xs for y in ys]


def imprint_like(patch, cfg):
    """Clip an already-windowed patch the way imprint() would."""
    return HeightField(np.minimum(patch.data, cfg.press_depth_mm),
                       patch.pixel_pitch_mm)


def generate_calibration_set(cfg, rows=13, cols=11, ball_radius_mm=4.0,
                             seed=0, max_samples_per_press=400,
                             depth_mm=None):
    """Render one press frame per grid location and harvest labeled pixels.

    Targets come from the analytic cap geometry (the simulator knows the
    exact ball pose), so no manual contact labeling is involved.  Returns
    the flat sample list; len(locations) = rows * cols frames are rendered.
    """
    depth = min(cfg.press_depth_mm if depth_mm is None else depth_mm,
                cfg.press_depth_mm)
    locations = calibration_grid_locations(cfg, rows, cols, ball_radius_mm,
                                           depth)
    background = render_background(cfg).rgb
    w, h = cfg.frame_width_px, cfg.frame_height_px
    pitch = cfg.pixel_pitch_mm
    x_mm, y_mm = _grid_mm(w, h, pitch)
    rng = np.random.default_rng(seed)
    samples = []
    for center in locations:
        patch = HeightField(
            sphere_cap_height(x_mm, y_mm, center, ball_radius_mm, depth),
            pitch)
        frame = render_frame(imprint_like(patch, cfg), cfg, seed=rng.integers(2**63))
        truth, contact = sphere_cap_truth(w, h, pitch, center,
                                          ball_radius_mm, depth,
                                          rim_margin_mm=pitch)
        sx0, sy0, sx1, sy1 = cfg.sensing_region()
        sel = contact.data.copy()
        sel[:sy0, :] = False
        sel[sy1:, :] = False
        idx_y, idx_x = np.nonzero(sel)
        if len(idx_y) > max_samples_per_press:
            # weight ~ 1/radius so the sampled slope magnitudes are close
            # to uniform; area-uniform picks starve the near-zero slopes
            d_px = np.hypot(idx_x - center[0] / pitch,
                            idx_y - center[1] / pitch)
            weights = 1.0 / (d_px + 1.0)
            weights /= weights.sum()
            keep = rng.choice(len(idx_y), size=max_samples_per_press,
                              replace=False, p=weights)
            keep.sort()
            idx_y, idx_x = idx_y[keep], idx_x[keep]
        feats = features_from_frame(frame.rgb, background)
        for iy, ix in zip(idx_y, idx_x):
            f = feats[iy, ix]
            samples.append(CalibrationSample(
                f[0], f[1], f[2], f[3], f[4],
                truth.data[iy, ix, 0], truth.data[iy, ix, 1]))
    return samples


class GradientRegressor:
    """RGBXY -> (gx, gy) per-pixel regressor with stored normalization."""

    def __init__(self, net, input_mean, input_std, meta=None):
        self.net = net
        self.input_mean = np.asarray(input_mean, dtype=np.float64)
        self.input_std = np.asarray(input_std, dtype=np.float64)
        self.meta = dict(meta or {})

    @property
    def layer_sizes(self):
        return list(self.net.sizes)

    def predict(self, features):
        x = (np.asarray(features, dtype=np.float64) - self.input_mean) \
            / self.input_std
        return self.net.predict(x, dtype=np.float32)

    def to_dict(self):
        return {
            "schema": MODEL_SCHEMA,
            "net": self.net.to_dict(),
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != MODEL_SCHEMA:
            raise InvalidInputError(f"unexpected model schema {d.get('schema')!r}")
        return cls(MLP.from_dict(d["net"]), d["input_mean"], d["input_std"],
                   d.get("meta"))

    def save(self, path):
        tmp = str(path) + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def train_gradient_regressor(samples, hidden=DEFAULT_HIDDEN, config=None,
                             seed=0):
    """Train the slope regressor on labeled calibration pixels.

    Samples are shuffled into 60:20:20 train/val/test splits; inputs are
    standardized with training-set statistics and the constants ride along
    in the model file.  Deterministic for a fixed seed.
    """
    if len(samples) < 1000:
        raise InvalidInputError(
            f"need at least 1000 calibration samples, got {len(samples)}")
    cfg = config or TrainConfig()
    X = np.array([[s.r, s.g, s.b, s.x, s.y] for s in samples])
    Y = np.array([[s.gx, s.gy] for s in samples])
    tr, va, te = split_indices(len(samples), seed=seed)
    mean = X[tr].mean(axis=0)
    std = X[tr].std(axis=0)
    std[std < 1e-9] = 1.0
    Xn = (X - mean) / std
    net = MLP([5, *hidden, 2], seed=seed)
    report = net.fit(Xn[tr], Y[tr], Xn[va], Y[va], config=cfg, seed=seed + 1)
    test_pred = net.predict(Xn[te])
    test_mse = float(np.mean((test_pred - Y[te]) ** 2))
    baseline = float(np.mean((Y[te] - Y[tr].mean(axis=0)) ** 2))
    meta = {
        "seed": seed,
        "epochs": cfg.epochs,
        "n_samples": len(samples),
        "train_loss": report.train_loss,
        "val_loss": report.val_loss,
        "final_val_mse": report.final_val_mse,
        "test_mse": test_mse,
        "test_r2": 1.0 - test_mse / baseline if baseline > 0 else 1.0,
    }
    return GradientRegressor(net, mean, std, meta)


def predict_gradient_field(model, frame, background):
    """Per-pixel slope prediction over the sensing region.

    Marker-band pixels are zeroed and masked out; saturated pixels keep
    their (finite) prediction but are flagged invalid in the mask.
    """
    if frame.rgb.shape != background.rgb.shape:
        raise InvalidInputError("frame and background dimensions must match")
    feats = features_from_frame(frame.rgb, background.rgb)
    h, w = frame.rgb.shape[:2]
    pred = model.predict(feats.reshape(-1, 5)).reshape(h, w, 2)
    valid = np.ones((h, w), dtype=bool)
    for x0, y0, x1, y1 in (frame.marker_band_left, frame.marker_band_right):
        pred[y0:y1, x0:x1, :] = 0.0
        valid[y0:y1, x0:x1] = False
    saturated = (frame.rgb == 255).all(axis=-1) | (frame.rgb == 0).all(axis=-1)
    valid &= ~saturated
    return GradientField(pred), Mask(valid)
