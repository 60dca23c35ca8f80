"""Side marker band analysis.

The belt edges carry rows of dots at aperiodic intervals.  Matching the
interval pattern between consecutive frames turns the bands into a
relative position encoder; spline-sampled band profiles feed small
regressors for contact roll/pitch and normal force.
"""

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .errors import (AmbiguousMatchError, InsufficientDataError,
                     InvalidInputError)
from .mlp import MLP, TrainConfig, split_indices
from .simulator import marker_positions

CONTACT_MODEL_SCHEMA = "beltscan-contact-model-v1"
DEFAULT_CONTACT_HIDDEN = (512, 256, 128)


@dataclass(frozen=True)
class MarkerObservation:
    """Sub-pixel dot centers for one band of one frame, sorted by x."""

    centers: tuple  # ((x, y), ...) in frame px
    band: str  # "left" or "right"
    frame_index: int = 0

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.centers)
        if any(pts[i][0] > pts[i + 1][0] for i in range(len(pts) - 1)):
            pts = tuple(sorted(pts))
        object.__setattr__(self, "centers", pts)

    def __len__(self):
        return len(self.centers)

    @property
    def xs(self):
        return np.array([c[0] for c in self.centers])

    @property
    def ys(self):
        return np.array([c[1] for c in self.centers])


# band -> color channel: dots sit next to the matching light
_BAND_CHANNEL = {"left": 0, "right": 2}


def _detect_in_band(channel, dot_radius_px, response_threshold):
    """Difference-of-Gaussian blobs with 5x5 centroid refinement.

    Returns band-local (x, y) centers.  Dots are dark on a lit background,
    so the channel is inverted against its median before filtering.
    """
    inv = (np.median(channel) - channel.astype(np.float64)) / 255.0
    base = dot_radius_px / math.sqrt(2.0)
    best = None
    for factor in (0.5, 0.75, 1.0, 1.25, 1.5):
        s = base * factor
        resp = ndimage.gaussian_filter(inv, s) - \
            ndimage.gaussian_filter(inv, 1.6 * s)
        best = resp if best is None else np.maximum(best, resp)
    peaks = (best == ndimage.maximum_filter(best, size=3)) & \
        (best > response_threshold)
    h, w = channel.shape
    margin = int(math.ceil(dot_radius_px)) + 1
    # plateaus (dot centers between pixels) produce tied peaks: keep the
    # strongest peak within one dot radius
    cand = sorted(zip(*np.nonzero(peaks)),
                  key=lambda p: (-best[p[0], p[1]], p[0], p[1]))
    kept = []
    for py, px in cand:
        if px < margin or px >= w - margin:
            continue
        if any((py - ky) ** 2 + (px - kx) ** 2 < dot_radius_px ** 2
               for ky, kx in kept):
            continue
        kept.append((py, px))
    centers = []
    for py, px in kept:
        y0, y1 = max(py - 2, 0), min(py + 3, h)
        x0, x1 = max(px - 2, 0), min(px + 3, w)
        win = np.clip(inv[y0:y1, x0:x1], 0.0, None)
        total = win.sum()
        if total <= 0:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        centers.append((float((win * xx).sum() / total),
                        float((win * yy).sum() / total)))
    centers.sort()
    return centers


def detect_markers(frame, spec, response_threshold=0.05):
    """Detect dots in both bands; returns (left, right) observations.

    The left band is searched in the red channel, the right band in the
    blue channel.  Empty bands yield empty observations.
    """
    out = []
    for band_name, region in (("left", frame.marker_band_left),
                              ("right", frame.marker_band_right)):
        x0, y0, x1, y1 = region
        channel = frame.rgb[y0:y1, x0:x1, _BAND_CHANNEL[band_name]]
        local = _detect_in_band(channel, spec.dot_radius_px,
                                response_threshold)
        centers = tuple((x + x0, y + y0) for x, y in local)
        out.append(MarkerObservation(centers, band_name, frame.frame_index))
    return tuple(out)


def match_displacement(prev, nxt, spec=None, ambiguity_margin=0.05):
    """Belt travel (px, positive = forward scan) between two observations.

    Candidate integer index offsets are scored by the mean squared
    difference of the overlapping interval sequences; the winner is
    refined to the mean sub-pixel residual of matched centers.

    The interval pattern repeats every block, so displacement is only
    identifiable within a window one block long.  With a MarkerSpec the
    window is forward-biased to match the scan direction:
    (-min_interval, block - min_interval).  Forward travel below
    block - min_interval resolves uniquely, backward jitter up to one
    minimum interval resolves uniquely, and anti-symmetry holds there.
    """
    if len(prev) < 3 or len(nxt) < 3:
        raise InsufficientDataError("need at least 3 markers in each frame")
    xp = prev.xs
    xn = nxt.xs
    dp = np.diff(xp)
    dn = np.diff(xn)
    candidates = []
    for k in range(-(len(xn) - 3), len(xp) - 2):
        i0 = max(0, -k)
        i1 = min(len(dn), len(dp) - k)
        if i1 - i0 < 2:
            continue
        disp = float(np.mean(xp[i0 + k:i1 + k + 1] - xn[i0:i1 + 1]))
        if spec is not None:
            back = min(spec.intervals)
            if disp >= spec.block_length_px - back or disp <= -back:
                continue
        score = float(np.mean((dn[i0:i1] - dp[i0 + k:i1 + k]) ** 2))
        candidates.append((score, k, disp))
    if not candidates:
        raise InsufficientDataError("no candidate alignment with enough overlap")
    candidates.sort()
    best = candidates[0]
    if len(candidates) > 1:
        second = candidates[1]
        if second[0] <= best[0] * (1.0 + ambiguity_margin) + 1e-2:
            raise AmbiguousMatchError(
                f"alignment ambiguous: scores {best[0]:.4f} px^2 vs "
                f"{second[0]:.4f} px^2 at offsets {best[1]} and {second[1]}")
    return best[2]


class MarkerEncoder:
    """Frame-pair displacement reader used as the optical-flow prior."""

    def __init__(self, spec, response_threshold=0.05):
        self.spec = spec
        self.response_threshold = response_threshold
        self.events = []
        self._cache = {}

    def observe(self, frame):
        key = frame.frame_index
        if key not in self._cache:
            self._cache[key] = detect_markers(frame, self.spec,
                                              self.response_threshold)
        return self._cache[key]

    def displacement(self, prev_frame, next_frame):
        """Mean of the per-band matches; None when neither band matches."""
        prev_obs = self.observe(prev_frame)
        next_obs = self.observe(next_frame)
        values = []
        for p, n in zip(prev_obs, next_obs):
            try:
                values.append(match_displacement(p, n, self.spec))
            except (AmbiguousMatchError, InsufficientDataError) as exc:
                self.events.append(
                    f"frames {prev_frame.frame_index}->"
                    f"{next_frame.frame_index} band {p.band}: {exc}")
        if not values:
            return None
        return float(np.mean(values))


def write_encoder_csv(path, rows):
    """rows of (frame_index, displacement_px, cumulative_px, ambiguous)."""
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "displacement_px", "cumulative_px",
                         "ambiguity_flag"])
        for idx, disp, cum, flag in rows:
            writer.writerow([idx, f"{disp:.6f}", f"{cum:.6f}", int(flag)])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# contact features and models

def feature_xs(width_px, n_points=10):
    """Fixed x abscissae where the band splines are sampled."""
    return np.linspace(0.1 * width_px, 0.9 * width_px, n_points)


@dataclass(frozen=True)
class ContactFeatures:
    """Spline-sampled band y values at the fixed abscissae."""

    xs: tuple
    left_y: tuple
    right_y: tuple

    def vector(self):
        return np.array(list(self.left_y) + list(self.right_y))


def _band_spline_samples(obs, xs):
    if len(obs) < 4:
        raise InsufficientDataError(
            f"{obs.band} band has {len(obs)} markers; a cubic spline needs 4")
    kx = obs.xs
    if kx[0] > xs[0] or kx[-1] < xs[-1]:
        raise InsufficientDataError(
            f"{obs.band} band markers do not span the feature abscissae")
    spline = CubicSpline(kx, obs.ys, bc_type="natural")
    return spline(xs)


def extract_contact_features(left_obs, right_obs, width_px, n_points=10):
    """Natural cubic splines through each band, sampled at fixed x."""
    xs = feature_xs(width_px, n_points)
    return ContactFeatures(tuple(xs),
                           tuple(_band_spline_samples(left_obs, xs)),
                           tuple(_band_spline_samples(right_obs, xs)))


@dataclass(frozen=True)
class DeflectionCoeffs:
    """Generative band-deflection model.

    y_band(x) = y0 + sag * u^2 + alpha * force + s * beta * roll * u
                + s * gamma * pitch,   u = (x - W/2) / (W/2),
    with s = +1 for the left band and -1 for the right band.
    """

    alpha_px_per_n: float = 0.05
    beta_px_per_deg: float = 0.4
    gamma_px_per_deg: float = 3.0
    sag_px: float = 4.0


ROLL_RANGE_DEG = (-10.0, 10.0)
PITCH_RANGE_DEG = (-3.0, 3.0)
FORCE_RANGE_N = (0.0, 60.0)


def synthesize_deflection(roll_deg, pitch_deg, force_n, spec, width_px=600,
                          noise_sigma_px=0.0, seed=0, phase_px=0.0,
                          coeffs=None, band_y=(12.0, 388.0)):
    """Deflected band observations for a given contact state."""
    if not (ROLL_RANGE_DEG[0] <= roll_deg <= ROLL_RANGE_DEG[1]):
        raise InvalidInputError(f"roll {roll_deg} deg out of range")
    if not (PITCH_RANGE_DEG[0] <= pitch_deg <= PITCH_RANGE_DEG[1]):
        raise InvalidInputError(f"pitch {pitch_deg} deg out of range")
    if not (FORCE_RANGE_N[0] <= force_n <= FORCE_RANGE_N[1]):
        raise InvalidInputError(f"force {force_n} N out of range")
    c = coeffs or DeflectionCoeffs()
    xs = marker_positions(spec, width_px, phase_px)
    u = (xs - width_px / 2.0) / (width_px / 2.0)
    rng = np.random.default_rng(seed)
    out = []
    for band, y0, s in (("left", band_y[0], 1.0), ("right", band_y[1], -1.0)):
        ys = (y0 + c.sag_px * u ** 2 + c.alpha_px_per_n * force_n +
              s * c.beta_px_per_deg * roll_deg * u +
              s * c.gamma_px_per_deg * pitch_deg)
        if noise_sigma_px > 0:
            ys = ys + rng.normal(0.0, noise_sigma_px, ys.shape)
        out.append(MarkerObservation(tuple(zip(xs, ys)), band))
    return tuple(out)


def build_contact_dataset(spec, width_px=600, noise_sigma_px=0.0, seed=0,
                          reps=35, pitch_step=0.5, roll_step=1.0,
                          coeffs=None):
    """Full angle grid x repetitions with rolled belt phases.

    Each sample draws a force uniformly over the working range; returns
    (X, Y) with X the 20 spline features and Y = (roll, pitch, force).
    """
    pitches = np.arange(PITCH_RANGE_DEG[0], PITCH_RANGE_DEG[1] + 1e-9,
                        pitch_step)
    rolls = np.arange(ROLL_RANGE_DEG[0], ROLL_RANGE_DEG[1] + 1e-9, roll_step)
    rng = np.random.default_rng(seed)
    X, Y = [], []
    for rep in range(reps):
        phase = rep * spec.block_length_px / reps
        for roll in rolls:
            for pitch in pitches:
                force = rng.uniform(*FORCE_RANGE_N)
                left, right = synthesize_deflection(
                    roll, pitch, force, spec, width_px=width_px,
                    noise_sigma_px=noise_sigma_px,
                    seed=rng.integers(2 ** 63), phase_px=phase,
                    coeffs=coeffs)
                feats = extract_contact_features(left, right, width_px)
                X.append(feats.vector())
                Y.append((roll, pitch, force))
    return np.array(X), np.array(Y)


class ContactModel:
    """Two regressors over band features: (roll, pitch) and normal force."""

    def __init__(self, angles_net, force_net, input_mean, input_std,
                 angles_scale, force_scale, angles_offset, force_offset,
                 meta=None):
        self.angles_net = angles_net
        self.force_net = force_net
        self.input_mean = np.asarray(input_mean, dtype=np.float64)
        self.input_std = np.asarray(input_std, dtype=np.float64)
        self.angles_scale = np.asarray(angles_scale, dtype=np.float64)
        self.force_scale = np.asarray(force_scale, dtype=np.float64)
        self.angles_offset = np.asarray(angles_offset, dtype=np.float64)
        self.force_offset = np.asarray(force_offset, dtype=np.float64)
        self.meta = dict(meta or {})

    def predict(self, features):
        x = np.asarray(features, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        xn = (x - self.input_mean) / self.input_std
        angles = self.angles_net.predict(xn) * self.angles_scale \
            + self.angles_offset
        force = self.force_net.predict(xn) * self.force_scale \
            + self.force_offset
        out = np.concatenate([angles, force], axis=-1)
        return out[0] if squeeze else out

    def to_dict(self):
        return {
            "schema": CONTACT_MODEL_SCHEMA,
            "angles_net": self.angles_net.to_dict(),
            "force_net": self.force_net.to_dict(),
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "angles_scale": self.angles_scale.tolist(),
            "force_scale": self.force_scale.tolist(),
            "angles_offset": self.angles_offset.tolist(),
            "force_offset": self.force_offset.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != CONTACT_MODEL_SCHEMA:
            raise InvalidInputError(
                f"unexpected model schema {d.get('schema')!r}")
        return cls(MLP.from_dict(d["angles_net"]),
                   MLP.from_dict(d["force_net"]),
                   d["input_mean"], d["input_std"], d["angles_scale"],
                   d["force_scale"], d["angles_offset"], d["force_offset"],
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


def train_contact_model(X, Y, seed=0, hidden=DEFAULT_CONTACT_HIDDEN,
                        config=None):
    """Fit the two contact regressors on a synthesized dataset.

    60:20:20 split, standardized inputs, targets scaled to unit magnitude
    per output.  Test MAEs land in model.meta.
    """
    cfg = config or TrainConfig(epochs=200)
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    tr, va, te = split_indices(len(X), seed=seed)
    mean = X[tr].mean(axis=0)
    std = X[tr].std(axis=0)
    std[std < 1e-9] = 1.0
    Xn = (X - mean) / std
    # zero-mean unit-variance targets keep the two heads equally conditioned
    angles_offset = Y[tr, :2].mean(axis=0)
    angles_scale = Y[tr, :2].std(axis=0)
    angles_scale[angles_scale < 1e-9] = 1.0
    force_offset = np.array([Y[tr, 2].mean()])
    force_scale = np.array([max(Y[tr, 2].std(), 1e-9)])
    ya = (Y[:, :2] - angles_offset) / angles_scale
    yf = (Y[:, 2:3] - force_offset) / force_scale
    angles_net = MLP([X.shape[1], *hidden, 2], seed=seed)
    angles_report = angles_net.fit(Xn[tr], ya[tr], Xn[va], ya[va],
                                   config=cfg, seed=seed + 1)
    force_net = MLP([X.shape[1], *hidden, 1], seed=seed + 2)
    force_report = force_net.fit(Xn[tr], yf[tr], Xn[va], yf[va],
                                 config=cfg, seed=seed + 3)
    pred_a = angles_net.predict(Xn[te]) * angles_scale + angles_offset
    pred_f = force_net.predict(Xn[te]) * force_scale + force_offset
    mae_roll = float(np.mean(np.abs(pred_a[:, 0] - Y[te, 0])))
    mae_pitch = float(np.mean(np.abs(pred_a[:, 1] - Y[te, 1])))
    mae_force = float(np.mean(np.abs(pred_f[:, 0] - Y[te, 2])))
    meta = {
        "seed": seed,
        "epochs": cfg.epochs,
        "n_samples": len(X),
        "test_mae_roll_deg": mae_roll,
        "test_mae_pitch_deg": mae_pitch,
        "test_mae_force_n": mae_force,
        "angles_val_loss": angles_report.val_loss,
        "force_val_loss": force_report.val_loss,
    }
    return ContactModel(angles_net, force_net, mean, std, angles_scale,
                        force_scale, angles_offset, force_offset, meta)


def predict_contact(model, features):
    """(roll_deg, pitch_deg, force_n) for one feature vector."""
    out = model.predict(np.asarray(features).reshape(-1))
    return float(out[0]), float(out[1]), float(out[2])
