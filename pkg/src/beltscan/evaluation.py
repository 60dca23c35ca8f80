"""Accuracy protocols run against simulator ground truth.

Covers the hex-indenter accuracy grid, the speed sweep, control-point
drift metrics, rigid point-cloud alignment and defect profile comparison.
Hardware reference figures are reported as context strings only, never
asserted against.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import (HeightField, Mask, NormalMap, Pose2D, mean_dot_product,
                   normal_from_gradients)
from .errors import DegenerateInputError, InvalidInputError
from .calibration import predict_gradient_field
from .markers import MarkerEncoder
from .reconstruction import reconstruct_scan
from .simulator import (hex_pyramid_truth, imprint, make_surface,
                        make_trajectory, render_background, render_frame,
                        save_png, simulate_scan, sphere_cap_height,
                        _grid_mm)

# hardware reference figures quoted for context in reports
REFERENCE_CONTEXT = {
    "drift_distance_mae_mm_robot": 0.333,
    "drift_angle_mae_deg_robot": 0.351,
    "drift_distance_mae_mm_manual": 0.381,
    "drift_angle_mae_deg_manual": 0.285,
    "force_error_n": 1.0,
    "angle_max_mean_error_deg": (1.38, 0.1),
}


@dataclass
class AccuracyGrid:
    rows: int
    cols: int
    values: np.ndarray  # (rows, cols) mean dot product per cell
    locations_mm: list  # (rows*cols) press centers
    indenter: str

    @property
    def mean(self):
        return float(self.values.mean())

    @property
    def min(self):
        return float(self.values.min())


def _single_press_accuracy(model, cfg, background, center_mm, indenter,
                           use_true_gradients, seed):
    w, h = cfg.frame_width_px, cfg.frame_height_px
    pitch = cfg.pixel_pitch_mm
    if indenter == "hex":
        surface = make_surface("hex_pyramid", cfg.sensing_width_mm,
                               cfg.sensing_height_mm, pitch,
                               center_mm=center_mm)
        # 3 px of erosion, capped so coarse pitches keep a scoring annulus
        truth_g, mask = hex_pyramid_truth(
            w, h, pitch, center_mm, clip_depth_mm=cfg.press_depth_mm,
            crease_margin_mm=min(3 * pitch, 0.3))
    else:
        raise InvalidInputError(f"unknown indenter {indenter!r}")
    truth_n = normal_from_gradients(truth_g)
    if use_true_gradients:
        pred_n = truth_n
        valid = Mask(np.ones((h, w), dtype=bool))
    else:
        patch = imprint(surface, Pose2D(0.0, 0.0), cfg)
        frame = render_frame(patch, cfg, seed=seed)
        pred_g, valid = predict_gradient_field(model, frame, background)
        pred_n = normal_from_gradients(pred_g)
    score_mask = Mask(mask.data & valid.data)
    return mean_dot_product(pred_n, truth_n, score_mask)


def accuracy_grid(model, cfg, rows=13, cols=11, indenter="hex",
                  use_true_gradients=False, seed=0, jobs=1):
    """Press the indenter over a rows x cols grid and score each cell.

    Cells are independent; with jobs > 1 they run on a thread pool and the
    results are placed by index, so the output does not depend on jobs.
    """
    x0, y0, x1, y1 = cfg.sensing_region()
    pitch = cfg.pixel_pitch_mm
    margin = 5.0  # keep the hex footprint inside the sensing region
    xs = np.linspace(x0 * pitch + margin, x1 * pitch - margin, rows)
    ys = np.linspace(y0 * pitch + margin, y1 * pitch - margin, cols)
    background = render_background(cfg)
    values = np.zeros((rows, cols))
    locations = [(float(cx), float(cy)) for cx in xs for cy in ys]
    children = np.random.SeedSequence(seed).spawn(rows * cols)

    def cell(k):
        return _single_press_accuracy(model, cfg, background, locations[k],
                                      indenter, use_true_gradients,
                                      children[k])

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(cell, range(rows * cols)))
    else:
        scores = [cell(k) for k in range(rows * cols)]
    for k, score in enumerate(scores):
        values[k // cols, k % cols] = score
    return AccuracyGrid(rows, cols, values, locations, indenter)


def write_accuracy_grid(out_dir, grid):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "accuracy_grid.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "col", "x_mm", "y_mm", "mean_dot_product"])
        k = 0
        for i in range(grid.rows):
            for j in range(grid.cols):
                x, y = grid.locations_mm[k]
                writer.writerow([i, j, f"{x:.3f}", f"{y:.3f}",
                                 f"{grid.values[i, j]:.6f}"])
                k += 1
    os.replace(tmp, path)
    _heatmap_png(os.path.join(out_dir, "accuracy_grid.png"), grid.values)


def _heatmap_png(path, values, scale=24):
    """Tiny dependency-free heatmap: blue (low) to red (high)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    t = np.zeros_like(v) if hi - lo < 1e-12 else (v - lo) / (hi - lo)
    rgb = np.stack([t, 0.2 + 0.3 * t, 1.0 - t], axis=-1)
    img = np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
    img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    save_png(path, img)


# ---------------------------------------------------------------------------
# speed sweep

DEFAULT_SPEEDS_MM_S = (3.0, 5.0, 10.0, 15.0, 25.0, 35.0, 45.0)


def _overlap_slices(origin_px, recon_shape, truth_shape):
    """Index slices aligning a reconstruction with the truth surface.

    Reconstruction pixel (0, 0) sits at origin_px in surface coordinates
    (rounded to the nearest pixel); the overlap clips both grids.
    """
    ox, oy = int(round(origin_px[0])), int(round(origin_px[1]))
    h, w = recon_shape[:2]
    th, tw = truth_shape[:2]
    x0, y0 = max(0, ox), max(0, oy)
    x1, y1 = min(tw, ox + w), min(th, oy + h)
    if x0 >= x1 or y0 >= y1:
        raise InvalidInputError("reconstruction does not overlap the truth")
    rec = (slice(y0 - oy, y1 - oy), slice(x0 - ox, x1 - ox))
    tru = (slice(y0, y1), slice(x0, x1))
    return rec, tru


def _scan_and_score_hex(model, cfg, speed_mm_s, fps, seed,
                        travel_mm=24.0):
    """Roll over a centered hex indenter and score the stitched normals.

    Scored against the clipped-surface truth over the full indentation
    footprint (slightly dilated), so edge smearing from motion blur and
    sparse frame coverage shows up in the metric.
    """
    surf_w = cfg.sensing_width_mm + travel_mm
    surface = make_surface("hex_pyramid", surf_w, cfg.sensing_height_mm,
                           cfg.pixel_pitch_mm,
                           center_mm=(surf_w / 2.0,
                                      cfg.sensing_height_mm / 2.0))
    n_frames = int(math.floor(travel_mm / (speed_mm_s / fps))) + 1
    traj = make_trajectory(n_frames, speed_mm_s, fps, cfg.pixel_pitch_mm,
                           seed=seed)
    scan = simulate_scan(surface, traj, cfg, seed=seed)
    background = render_background(cfg)
    encoder = MarkerEncoder(cfg.marker_spec)
    result = reconstruct_scan(scan.frames, model, background, cfg,
                              encoder=encoder)
    truth_n = scan.true_global_normals()
    footprint = ndimage.binary_dilation(surface.data > 0, iterations=3)
    rec, tru = _overlap_slices(result.origin_px, result.normals.data.shape,
                               truth_n.data.shape)
    pred = NormalMap(result.normals.data[rec])
    truth = NormalMap(truth_n.data[tru])
    mask = Mask(footprint[tru] & result.coverage.data[rec])
    return mean_dot_product(pred, truth, mask)


def speed_sweep(model, cfg, speeds=DEFAULT_SPEEDS_MM_S, fps=10.0, seed=0,
                travel_mm=24.0, jobs=1):
    """Accuracy of the stitched hex reconstruction per scanning speed."""
    def point(i):
        return float(_scan_and_score_hex(model, cfg, speeds[i], fps,
                                         seed + i, travel_mm))

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(point, range(len(speeds))))
    else:
        accs = [point(i) for i in range(len(speeds))]
    return [(float(s), a) for s, a in zip(speeds, accs)]


def write_speed_sweep(out_dir, table):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "speed_sweep.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["speed_mm_s", "mean_dot_product"])
        for speed, acc in table:
            writer.writerow([f"{speed:.1f}", f"{acc:.6f}"])
    os.replace(tmp, path)


def spearman_rank_correlation(x, y):
    """Spearman rho via ranks; small-n exact, no tie handling beyond mean."""
    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=np.float64)
        # average ranks for ties
        vv = np.asarray(v)
        for val in np.unique(vv):
            sel = vv == val
            if sel.sum() > 1:
                r[sel] = r[sel].mean()
        return r

    rx = ranks(np.asarray(x))
    ry = ranks(np.asarray(y))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx ** 2).sum() * (ry ** 2).sum()))
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


# ---------------------------------------------------------------------------
# control-point drift

@dataclass
class DriftReport:
    """Per-segment errors between reconstructed and true point layouts."""

    segments: list  # (i, j, true_len_mm, rec_len_mm, len_err_mm, ang_err_deg)
    distance_mae_mm: float
    angle_mae_deg: float
    points_px: list
    reference_context: dict = field(default_factory=lambda: dict(
        distance_mae_mm_robot=REFERENCE_CONTEXT["drift_distance_mae_mm_robot"],
        angle_mae_deg_robot=REFERENCE_CONTEXT["drift_angle_mae_deg_robot"]))


def control_point_surface(cfg, travel_mm=40.0, bump_radius_mm=2.0,
                          bump_depth_mm=0.35, cols_x_mm=(25.0, 45.0, 65.0),
                          rows_y_mm=(8.0, 20.0, 32.0)):
    """Flat plate with a 3x3 layout of spherical-cap bumps.

    Returns (surface, true_centers_mm) with centers in surface coords.
    """
    w_mm = cfg.sensing_width_mm + travel_mm
    h_mm = cfg.sensing_height_mm
    pitch = cfg.pixel_pitch_mm
    w = int(round(w_mm / pitch))
    h = int(round(h_mm / pitch))
    x, y = _grid_mm(w, h, pitch)
    z = np.zeros((h, w))
    centers = []
    for cy in rows_y_mm:
        for cx in cols_x_mm:
            z = np.maximum(z, sphere_cap_height(x, y, (cx, cy),
                                                bump_radius_mm,
                                                bump_depth_mm))
            centers.append((cx, cy))
    return HeightField(z, pitch), centers


def locate_bump(height, approx_px, search_radius_px=25):
    """Sub-pixel bump center: intensity centroid above half maximum."""
    h = height.data
    x0 = int(round(approx_px[0]))
    y0 = int(round(approx_px[1]))
    r = search_radius_px
    ys = slice(max(y0 - r, 0), min(y0 + r + 1, h.shape[0]))
    xs = slice(max(x0 - r, 0), min(x0 + r + 1, h.shape[1]))
    win = h[ys, xs]
    base = np.median(win)
    rel = win - base
    peak = rel.max()
    if peak <= 1e-6:
        raise DegenerateInputError(
            f"no bump found near ({approx_px[0]:.0f}, {approx_px[1]:.0f}) px")
    w = np.clip(rel - 0.5 * peak, 0.0, None)
    yy, xx = np.mgrid[ys, xs]
    total = w.sum()
    return (float((w * xx).sum() / total), float((w * yy).sum() / total))


def drift_metrics(recon_height, expected_points_px, pixel_pitch_mm,
                  true_points_mm, search_radius_px=25):
    """Segment length and orientation errors over all point pairs.

    Both metrics are invariant to a global translation of the
    reconstruction; angles are compared modulo 180 degrees.
    """
    found = [locate_bump(recon_height, p, search_radius_px)
             for p in expected_points_px]
    rec_mm = np.asarray(found) * pixel_pitch_mm
    true_mm = np.asarray(true_points_mm, dtype=np.float64)
    n = len(true_mm)
    segments = []
    len_errs = []
    ang_errs = []
    for i in range(n):
        for j in range(i + 1, n):
            tv = true_mm[j] - true_mm[i]
            rv = rec_mm[j] - rec_mm[i]
            tl = float(np.hypot(*tv))
            rl = float(np.hypot(*rv))
            ta = math.degrees(math.atan2(tv[1], tv[0]))
            ra = math.degrees(math.atan2(rv[1], rv[0]))
            da = abs(ra - ta) % 360.0
            da = min(da, 360.0 - da)
            da = min(da, abs(180.0 - da))
            segments.append((i, j, tl, rl, abs(rl - tl), da))
            len_errs.append(abs(rl - tl))
            ang_errs.append(da)
    return DriftReport(segments, float(np.mean(len_errs)),
                       float(np.mean(ang_errs)), found)


def write_drift_report(out_dir, report):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "drift_report.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["point_i", "point_j", "true_len_mm", "rec_len_mm",
                         "len_err_mm", "angle_err_deg"])
        for seg in report.segments:
            writer.writerow([seg[0], seg[1], f"{seg[2]:.4f}", f"{seg[3]:.4f}",
                             f"{seg[4]:.4f}", f"{seg[5]:.4f}"])
        writer.writerow([])
        writer.writerow(["distance_mae_mm", f"{report.distance_mae_mm:.4f}"])
        writer.writerow(["angle_mae_deg", f"{report.angle_mae_deg:.4f}"])
        for key, val in report.reference_context.items():
            writer.writerow([f"reference_{key}", val])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# rigid alignment

@dataclass
class ICPResult:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    residuals: list  # RMS point distance per iteration

    @property
    def final_residual(self):
        return self.residuals[-1]

    def apply(self, points):
        return points @ self.rotation.T + self.translation


def _rigid_fit(source, target):
    """Least-squares rigid transform source -> target (Kabsch)."""
    sc = source.mean(axis=0)
    tc = target.mean(axis=0)
    h = (source - sc).T @ (target - tc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    diag = np.diag([1.0, 1.0, d])
    rot = vt.T @ diag @ u.T
    trans = tc - rot @ sc
    return rot, trans


def icp_align(source, target, max_iterations=50, tolerance=1e-6):
    """Point-to-point ICP with SVD rigid fits; residual never increases."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.ndim != 2 or source.shape[1] != 3 or len(source) < 3 \
            or target.ndim != 2 or target.shape[1] != 3 or len(target) < 3:
        raise InvalidInputError("point clouds must be (N>=3, 3)")
    for pts in (source, target):
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
            raise DegenerateInputError("points are collinear or coincident")
    tree = cKDTree(target)
    rot = np.eye(3)
    trans = np.zeros(3)
    residuals = []
    current = source.copy()
    for _ in range(max_iterations):
        dists, idx = tree.query(current)
        residuals.append(float(np.sqrt(np.mean(dists ** 2))))
        r_step, t_step = _rigid_fit(current, target[idx])
        current = current @ r_step.T + t_step
        rot = r_step @ rot
        trans = r_step @ trans + t_step
        if len(residuals) >= 2 and residuals[-2] - residuals[-1] < tolerance:
            break
    dists, _ = tree.query(current)
    residuals.append(float(np.sqrt(np.mean(dists ** 2))))
    return ICPResult(rot, trans, residuals)


def write_icp_report(out_dir, result):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "icp_report.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump({
            "rotation": result.rotation.tolist(),
            "translation": result.translation.tolist(),
            "residuals": result.residuals,
        }, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# defect comparison

@dataclass
class DefectReport:
    rmse_mm: float
    truth_profile_mm: np.ndarray
    recon_profile_mm: np.ndarray
    icp: ICPResult


def _height_to_points(height, step=4):
    h = height.data
    pitch = height.pixel_pitch_mm
    yy, xx = np.mgrid[0:h.shape[0]:step, 0:h.shape[1]:step]
    return np.stack([xx.ravel() * pitch, yy.ravel() * pitch,
                     h[yy, xx].ravel()], axis=-1)


def defect_compare(surface, model, cfg, speed_mm_s=10.0, fps=10.0, seed=0):
    """Scan a defect plate, align the recovered heights to truth, report RMSE.

    The reconstruction is aligned to the clipped truth with ICP on
    subsampled point clouds; profiles are the central x cross sections.
    """
    travel_px = surface.width - cfg.frame_width_px
    if travel_px < 1:
        raise InvalidInputError("surface narrower than the sensor window")
    step_px = speed_mm_s / (fps * cfg.pixel_pitch_mm)
    n_frames = int(math.floor(travel_px / step_px)) + 1
    traj = make_trajectory(n_frames, speed_mm_s, fps, cfg.pixel_pitch_mm,
                           seed=seed)
    scan = simulate_scan(surface, traj, cfg, seed=seed)
    background = render_background(cfg)
    encoder = MarkerEncoder(cfg.marker_spec)
    result = reconstruct_scan(scan.frames, model, background, cfg,
                              encoder=encoder)
    truth_all = scan.clipped_surface()
    rec, tru = _overlap_slices(result.origin_px, result.height.data.shape,
                               truth_all.data.shape)
    rec_crop = result.height.data[rec]
    rec_field = HeightField(rec_crop - rec_crop.mean(), cfg.pixel_pitch_mm)
    truth_crop = truth_all.data[tru]
    truth_field = HeightField(truth_crop - truth_crop.mean(),
                              cfg.pixel_pitch_mm)
    icp = icp_align(_height_to_points(rec_field),
                    _height_to_points(truth_field))
    aligned = icp.apply(_height_to_points(rec_field, step=1))
    h, w = rec_field.data.shape
    aligned_z = aligned[:, 2].reshape(h, w)
    rmse = float(np.sqrt(np.mean((aligned_z - truth_field.data) ** 2)))
    mid = h // 2
    return DefectReport(rmse, truth_field.data[mid, :].copy(),
                        aligned_z[mid, :].copy(), icp)
