"""Frame-to-frame registration, mosaicking and height integration.

Per-frame normal maps are registered by translation-only Lucas-Kanade
optical flow run on the (nx, ny) channels, warm-started from the marker
encoder when available.  Registered maps are blended into a global mosaic
with sigmoid edge weights, and the mosaic is integrated into a height
field with a cosine-transform Poisson solver.
"""

import csv
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .core import (GradientField, HeightField, Mask, NormalMap, Pose2D,
                   gradients_from_normals, normal_from_gradients)
from .errors import InvalidInputError, UnsupportedRegionError
from . import gbf
from .calibration import predict_gradient_field
from .simulator import save_png


class FlowEstimate(NamedTuple):
    """Sub-pixel translation between two frames plus a quality score."""

    dx: float
    dy: float
    confidence: float
    iterations: int


def _bilinear(img, x, y):
    """Sample (H, W, C) image at float coords; returns values and validity."""
    h, w = img.shape[:2]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.clip(x, 0, w - 1)
    ys = np.clip(y, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (xs - x0)[..., None]
    ay = (ys - y0)[..., None]
    out = (img[y0, x0] * (1 - ax) * (1 - ay) + img[y0, x1] * ax * (1 - ay) +
           img[y1, x0] * (1 - ax) * ay + img[y1, x1] * ax * ay)
    return out, valid


def _grad_xy(img):
    gy, gx = np.gradient(img, axis=(0, 1))
    return gx, gy


class _LKLevel:
    """Pre-smoothed images and gradients for one pyramid level."""

    def __init__(self, mov, ref, sigma):
        self.ref = ndimage.gaussian_filter(ref, (sigma, sigma, 0))
        self.mov = ndimage.gaussian_filter(mov, (sigma, sigma, 0))
        self.rgx, self.rgy = _grad_xy(self.ref)
        self.mgx, self.mgy = _grad_xy(self.mov)
        hh, ww = self.ref.shape[:2]
        self.yy, self.xx = np.mgrid[0:hh, 0:ww].astype(np.float64)

    def refine(self, d, max_iterations, tol_px):
        """Iterate the 2x2 translation update; returns (d, iters, ok)."""
        iters = 0
        for _ in range(max_iterations):
            warped, valid = _bilinear(self.mov, self.xx + d[0],
                                      self.yy + d[1])
            if valid.sum() < 64:
                return d, iters, False
            wgx, _ = _bilinear(self.mgx, self.xx + d[0], self.yy + d[1])
            wgy, _ = _bilinear(self.mgy, self.xx + d[0], self.yy + d[1])
            gx = 0.5 * (self.rgx + wgx)
            gy = 0.5 * (self.rgy + wgy)
            r = warped - self.ref
            v = valid[..., None]
            tensor = np.array([
                [float(np.sum(gx * gx * v)), float(np.sum(gx * gy * v))],
                [float(np.sum(gx * gy * v)), float(np.sum(gy * gy * v))]])
            n_valid = float(valid.sum()) * self.ref.shape[-1]
            if np.linalg.eigvalsh(tensor)[0] / n_valid < 1e-9:
                return d, iters, False
            rhs = np.array([float(np.sum(gx * r * v)),
                            float(np.sum(gy * r * v))])
            step = -np.linalg.solve(tensor, rhs)
            d = d + step
            iters += 1
            if float(np.hypot(step[0], step[1])) < tol_px:
                break
        return d, iters, True

    def residual_rms(self, d):
        warped, valid = _bilinear(self.mov, self.xx + d[0], self.yy + d[1])
        if valid.sum() < 64:
            return float("inf"), 0.0
        r = (warped - self.ref)[valid]
        ref_sel = self.ref[valid]
        res = float(np.sqrt(np.mean(r ** 2)))
        sig = float(np.sqrt(np.mean((ref_sel - ref_sel.mean(0)) ** 2)))
        return res, sig


def estimate_flow(prev, nxt, init=Pose2D(0.0, 0.0), levels=3, window_px=21,
                  max_iterations=50, tol_px=0.01):
    """Translation of `nxt` relative to `prev` in pose convention.

    Solves prev(x + d) = nxt(x) in least squares over the (nx, ny)
    channels.  Two candidates are refined: a coarse-to-fine pyramid pass
    (capture range for poor priors) and a finest-level-only pass anchored
    at `init` (protects a good marker prior from coarse-scale aliasing);
    the one with the lower final residual wins.  Textureless input keeps
    the prior and returns confidence 0.
    """
    if prev.data.shape != nxt.data.shape:
        raise InvalidInputError("flow inputs must have equal dimensions")
    a = prev.data[..., :2].astype(np.float64)
    b = nxt.data[..., :2].astype(np.float64)
    h, w = a.shape[:2]
    levels = max(1, min(levels, int(math.log2(max(min(h, w) / 16, 1))) + 1))
    sigma = window_px / 6.0
    pyr = []
    ca, cb = a, b
    for lev in range(levels):
        if lev > 0:
            ca = ndimage.gaussian_filter(ca, (1.0, 1.0, 0))[::2, ::2]
            cb = ndimage.gaussian_filter(cb, (1.0, 1.0, 0))[::2, ::2]
        pyr.append(_LKLevel(ca, cb, sigma))

    init_d = np.array([init[0], init[1]], dtype=np.float64)
    total_iters = 0
    # pyramid pass, coarse to fine
    d_pyr = init_d / 2 ** (levels - 1)
    pyramid_ok = False
    for lev in range(levels - 1, -1, -1):
        if lev < levels - 1:
            d_pyr = d_pyr * 2.0
        d_pyr, iters, ok = pyr[lev].refine(d_pyr, max_iterations, tol_px)
        total_iters += iters
        pyramid_ok = pyramid_ok or ok
    # prior-anchored pass on the finest level only
    d_fine, iters, fine_ok = pyr[0].refine(init_d.copy(), max_iterations,
                                           tol_px)
    total_iters += iters

    candidates = []
    if pyramid_ok:
        candidates.append(d_pyr)
    if fine_ok:
        candidates.append(d_fine)
    if not candidates:
        return FlowEstimate(float(init[0]), float(init[1]), 0.0, total_iters)
    scored = [(pyr[0].residual_rms(d), tuple(d)) for d in candidates]
    (res, sig), best = min(scored, key=lambda t: t[0][0])
    confidence = float(np.clip(1.0 - res / (sig + 1e-12), 0.0, 1.0))
    return FlowEstimate(float(best[0]), float(best[1]), confidence,
                        total_iters)


def compose_poses(deltas):
    """Prefix-sum frame-to-frame translations; pose[0] is the origin."""
    poses = [Pose2D(0.0, 0.0)]
    for d in deltas:
        poses.append(Pose2D(poses[-1].tx + d[0], poses[-1].ty + d[1]))
    return poses


def sigmoid_weight_map(width, height, margin_frac=0.1, steepness=None):
    """Separable blending weights: logistic ramps at the frame edges.

    Each axis ramps 0.05 -> 0.95 across a margin of margin_frac * dim,
    centered margin_frac * dim from the edge, and plateaus at 1 inside.
    """
    if not (0.0 < margin_frac < 0.5):
        raise InvalidInputError("margin_frac must be in (0, 0.5)")

    def axis_weights(n):
        margin = margin_frac * n
        k = steepness if steepness is not None else 2.0 * math.log(19.0) / margin
        t = np.arange(n, dtype=np.float64)
        lo = 1.0 / (1.0 + np.exp(-k * (t - margin)))
        hi = 1.0 / (1.0 + np.exp(-k * ((n - 1 - t) - margin)))
        return lo * hi

    return axis_weights(height)[:, None] * axis_weights(width)[None, :]


class GlobalMosaic:
    """Weighted normal accumulator over the global scan bounding box."""

    def __init__(self, origin_px, width, height):
        self.origin_px = (float(origin_px[0]), float(origin_px[1]))
        self.sums = np.zeros((height, width, 3))
        self.weights = np.zeros((height, width))

    @property
    def bbox_px(self):
        x0, y0 = self.origin_px
        return (x0, y0, x0 + self.sums.shape[1], y0 + self.sums.shape[0])

    def add(self, normal_map, pose, weight_map, valid=None):
        """Splat one frame at its global pose with bilinear sub-pixel spread."""
        vals = normal_map.data
        w = np.array(weight_map, dtype=np.float64)
        if valid is not None:
            w = w * valid.data
        fx = pose[0] - self.origin_px[0]
        fy = pose[1] - self.origin_px[1]
        ix, iy = int(math.floor(fx)), int(math.floor(fy))
        ax, ay = fx - ix, fy - iy
        h, wpx = vals.shape[:2]
        for dy, dx, corner in ((0, 0, (1 - ax) * (1 - ay)),
                               (0, 1, ax * (1 - ay)),
                               (1, 0, (1 - ax) * ay),
                               (1, 1, ax * ay)):
            if corner == 0.0:
                continue
            ys = slice(iy + dy, iy + dy + h)
            xs = slice(ix + dx, ix + dx + wpx)
            self.weights[ys, xs] += w * corner
            self.sums[ys, xs] += vals * (w * corner)[..., None]

    def finalize(self, min_weight=1e-9):
        """Divide by accumulated weight and renormalize to unit vectors."""
        covered = self.weights > min_weight
        n = np.zeros_like(self.sums)
        n[..., 2] = -1.0
        n[covered] = self.sums[covered] / self.weights[covered, None]
        norms = np.linalg.norm(n, axis=-1)
        ok = covered & (norms > 1e-9) & (n[..., 2] < 0)
        n[~ok] = (0.0, 0.0, -1.0)
        n[ok] /= norms[ok, None]
        return NormalMap(n), Mask(ok)


def stitch(normal_maps, poses, weight_map, masks=None):
    """Blend registered frames; returns (mosaic, normals, coverage mask)."""
    if len(normal_maps) < 1 or len(normal_maps) != len(poses):
        raise InvalidInputError("need one pose per normal map")
    h, w = normal_maps[0].data.shape[:2]
    txs = [p[0] for p in poses]
    tys = [p[1] for p in poses]
    x0 = math.floor(min(txs))
    y0 = math.floor(min(tys))
    x1 = math.ceil(max(txs)) + w + 1
    y1 = math.ceil(max(tys)) + h + 1
    mosaic = GlobalMosaic((x0, y0), x1 - x0, y1 - y0)
    for i, (nm, pose) in enumerate(zip(normal_maps, poses)):
        mosaic.add(nm, pose, weight_map, None if masks is None else masks[i])
    normals, covered = mosaic.finalize()
    return mosaic, normals, covered


def poisson_integrate(g, mask=None, pixel_pitch_mm=1.0):
    """Least-squares height from a gradient field via cosine transforms.

    Solves lap(h) = div(g) on a rectangular region; the natural Neumann
    boundary fluxes are folded into the right-hand side so the DCT basis
    (zero normal derivative) applies.  Output is zero-mean, in mm.
    """
    if mask is not None:
        sel = mask.data
        if sel.shape != g.data.shape[:2]:
            raise InvalidInputError("mask dimensions must match gradients")
        if not sel.any():
            raise UnsupportedRegionError("mask selects no pixels")
        ys, xs = np.nonzero(sel)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        rect = np.zeros_like(sel)
        rect[y0:y1, x0:x1] = True
        if not np.array_equal(sel, rect):
            raise UnsupportedRegionError(
                "integration mask must be a filled rectangle")
        gdata = g.data[y0:y1, x0:x1]
    else:
        gdata = g.data
    h, w = gdata.shape[:2]
    if h < 3 or w < 3:
        raise InvalidInputError("integration region must be at least 3x3")
    # slopes per pixel step
    p = gdata[..., 0] * pixel_pitch_mm
    q = gdata[..., 1] * pixel_pitch_mm

    # divergence with replicated-edge central differences
    px = 0.5 * (np.hstack((p[:, 1:], p[:, -1:])) -
                np.hstack((p[:, :1], p[:, :-1])))
    qy = 0.5 * (np.vstack((q[1:, :], q[-1:, :])) -
                np.vstack((q[:1, :], q[:-1, :])))
    f = px + qy

    # natural boundary fluxes g.n folded into the right-hand side
    s2 = math.sqrt(2.0)
    b = np.zeros_like(p)
    b[0, 1:-1] = -q[0, 1:-1]
    b[-1, 1:-1] = q[-1, 1:-1]
    b[1:-1, 0] = -p[1:-1, 0]
    b[1:-1, -1] = p[1:-1, -1]
    b[0, 0] = (-q[0, 0] - p[0, 0]) / s2
    b[0, -1] = (-q[0, -1] + p[0, -1]) / s2
    b[-1, -1] = (q[-1, -1] + p[-1, -1]) / s2
    b[-1, 0] = (q[-1, 0] - p[-1, 0]) / s2
    f[0, 1:-1] -= b[0, 1:-1]
    f[-1, 1:-1] -= b[-1, 1:-1]
    f[1:-1, 0] -= b[1:-1, 0]
    f[1:-1, -1] -= b[1:-1, -1]
    f[0, 0] -= s2 * b[0, 0]
    f[0, -1] -= s2 * b[0, -1]
    f[-1, -1] -= s2 * b[-1, -1]
    f[-1, 0] -= s2 * b[-1, 0]

    fc = dctn(f, type=2, norm="ortho")
    x_idx, y_idx = np.meshgrid(np.arange(w), np.arange(h))
    denom = ((2.0 * np.cos(math.pi * x_idx / w) - 2.0) +
             (2.0 * np.cos(math.pi * y_idx / h) - 2.0))
    denom[0, 0] = 1.0
    fc /= denom
    fc[0, 0] = 0.0
    z = idctn(fc, type=2, norm="ortho")
    z -= z.mean()
    return HeightField(z, pixel_pitch_mm)


@dataclass
class ReconstructionResult:
    normals: NormalMap
    height: HeightField
    poses: list
    frame_indices: list
    confidences: list
    coverage: Mask
    origin_px: tuple
    log: list = field(default_factory=list)


def _covered_rectangle(valid):
    """Largest axis-aligned all-covered rectangle (greedy row/col shrink)."""
    ys, xs = np.nonzero(valid)
    if len(ys) == 0:
        raise UnsupportedRegionError("mosaic has no covered pixels")
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    sub = valid[y0:y1, x0:x1]
    rows = np.nonzero(sub.all(axis=1))[0]
    if len(rows) == 0:
        rows = np.arange(sub.shape[0])
    sub2 = sub[rows.min():rows.max() + 1]
    cols = np.nonzero(sub2.all(axis=0))[0]
    if len(cols) == 0:
        cols = np.arange(sub2.shape[1])
    return (y0 + rows.min(), y0 + rows.max() + 1,
            x0 + cols.min(), x0 + cols.max() + 1)


def reconstruct_scan(frames, model, background, cfg, encoder=None,
                     use_flow=True, min_step_px=1.0, low_confidence=0.5,
                     prior_gate_px=3.0):
    """Full pipeline: gradients -> normals -> register -> stitch -> height.

    Near-duplicate frames (marker prior moved < min_step_px since the last
    kept frame) are skipped.  Flow refines the marker prior; estimates that
    are low-confidence or that contradict the prior by more than
    prior_gate_px (alias lobes on repeating texture) fall back to the
    prior, and the event is logged.
    """
    if len(frames) < 1:
        raise InvalidInputError("need at least one frame")
    log = []
    # flat-field correction: the regressor's residual response to the
    # background is a static overlay that drags flow toward zero shift
    bias, _ = predict_gradient_field(model, background, background)
    normals = []
    valids = []
    for frame in frames:
        gfield, valid = predict_gradient_field(model, frame, background)
        normals.append(normal_from_gradients(
            GradientField(gfield.data - bias.data)))
        valids.append(valid)

    kept = [0]
    priors = []
    for i in range(1, len(frames)):
        prior_dx = None
        if encoder is not None:
            prior_dx = encoder.displacement(frames[kept[-1]], frames[i])
            if prior_dx is not None and abs(prior_dx) < min_step_px \
                    and i != len(frames) - 1:
                log.append(f"frame {i}: skipped (moved "
                           f"{prior_dx:.2f} px < {min_step_px} px)")
                continue
        kept.append(i)
        priors.append(prior_dx)

    deltas = []
    confidences = [1.0]
    for j in range(1, len(kept)):
        have_prior = priors[j - 1] is not None
        prior = Pose2D(priors[j - 1] if have_prior else 0.0, 0.0)
        if use_flow:
            est = estimate_flow(normals[kept[j - 1]], normals[kept[j]],
                                init=prior)
            if have_prior:
                off_prior = math.hypot(est.dx - prior.tx, est.dy - prior.ty)
                if est.confidence < low_confidence:
                    log.append(f"frame {kept[j]}: flow confidence "
                               f"{est.confidence:.2f}, using marker prior")
                    est = FlowEstimate(prior.tx, prior.ty, est.confidence,
                                       est.iterations)
                elif off_prior > prior_gate_px:
                    log.append(f"frame {kept[j]}: flow moved {off_prior:.1f} "
                               f"px off the marker prior, using the prior")
                    est = FlowEstimate(prior.tx, prior.ty, est.confidence,
                                       est.iterations)
        else:
            est = FlowEstimate(prior.tx, prior.ty, 1.0, 0)
        deltas.append(est)
        confidences.append(est.confidence)

    poses = compose_poses(deltas)
    weight_map = sigmoid_weight_map(cfg.frame_width_px, cfg.frame_height_px)
    mosaic, stitched, covered = stitch([normals[i] for i in kept], poses,
                                       weight_map,
                                       masks=[valids[i] for i in kept])
    y0, y1, x0, x1 = _covered_rectangle(covered.data)
    crop = NormalMap(stitched.data[y0:y1, x0:x1])
    g = gradients_from_normals(crop)
    height = poisson_integrate(g, pixel_pitch_mm=cfg.pixel_pitch_mm)
    origin = (mosaic.origin_px[0] + x0, mosaic.origin_px[1] + y0)
    cov = Mask(covered.data[y0:y1, x0:x1])
    return ReconstructionResult(crop, height, poses, kept, confidences,
                                cov, origin, log)


def write_reconstruction(out_dir, result, pixel_pitch_mm):
    """global_normals.gbf1 + global_height.gbf1 + poses.csv + preview.png."""
    os.makedirs(out_dir, exist_ok=True)
    gbf.write_gbf1(os.path.join(out_dir, "global_normals.gbf1"),
                   result.normals, pixel_pitch_mm=pixel_pitch_mm)
    gbf.write_gbf1(os.path.join(out_dir, "global_height.gbf1"), result.height)
    tmp = os.path.join(out_dir, "poses.csv.tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "tx_px", "ty_px", "confidence"])
        for idx, pose, conf in zip(result.frame_indices, result.poses,
                                   result.confidences):
            writer.writerow([idx, f"{pose.tx:.6f}", f"{pose.ty:.6f}",
                             f"{conf:.6f}"])
    os.replace(tmp, os.path.join(out_dir, "poses.csv"))
    preview = np.clip(np.rint((result.normals.data + 1.0) / 2.0 * 255.0),
                      0, 255).astype(np.uint8)
    save_png(os.path.join(out_dir, "preview.png"), preview)
