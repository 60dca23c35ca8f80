import numpy as np
import pytest

from beltscan.core import HeightField
from beltscan.errors import DegenerateInputError, InvalidInputError
from beltscan.evaluation import (accuracy_grid, control_point_surface,
                                 defect_compare, drift_metrics, icp_align,
                                 locate_bump, spearman_rank_correlation,
                                 write_accuracy_grid, write_icp_report,
                                 write_speed_sweep)
from beltscan.simulator import SensorConfig, make_surface


def eval_cfg():
    return SensorConfig(pixel_pitch_mm=0.25, noise_sigma=1.0)


class TestAccuracyGrid:
    def test_oracle_pipeline_gives_unity(self, default_cfg):
        grid = accuracy_grid(None, default_cfg, rows=3, cols=3,
                             use_true_gradients=True, seed=0)
        assert np.allclose(grid.values, 1.0, atol=1e-9)

    def test_default_grid_has_143_cells(self, default_cfg):
        grid = accuracy_grid(None, default_cfg, use_true_gradients=True,
                             seed=0)
        assert (grid.rows, grid.cols) == (13, 11)
        assert grid.values.size == 143
        assert len(grid.locations_mm) == 143

    def test_jobs_do_not_change_results(self, default_cfg):
        a = accuracy_grid(None, default_cfg, rows=2, cols=3,
                          use_true_gradients=True, seed=1, jobs=1)
        b = accuracy_grid(None, default_cfg, rows=2, cols=3,
                          use_true_gradients=True, seed=1, jobs=3)
        assert (a.values == b.values).all()

    def test_writer_outputs(self, tmp_path, default_cfg):
        grid = accuracy_grid(None, default_cfg, rows=2, cols=2,
                             use_true_gradients=True, seed=0)
        write_accuracy_grid(tmp_path, grid)
        csv_path = tmp_path / "accuracy_grid.csv"
        assert csv_path.exists()
        assert (tmp_path / "accuracy_grid.png").exists()
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 1 + 4


class TestSpeedSweep:
    def test_zero_blur_makes_speed_irrelevant(self, default_model):
        # speed only enters through blur and frame spacing
        cfg = SensorConfig(pixel_pitch_mm=0.25, noise_sigma=0.0,
                           blur_px_per_mm_s=0.0)
        from beltscan.evaluation import speed_sweep

        table = speed_sweep(default_model, cfg, speeds=(3.0, 15.0, 45.0),
                            fps=10.0, seed=0, travel_mm=20.0)
        accs = [a for _, a in table]
        assert max(accs) - min(accs) < 0.002


class TestSpearman:
    def test_monotone_decreasing(self):
        assert spearman_rank_correlation([1, 2, 3, 4], [4, 3, 2, 1]) == \
            pytest.approx(-1.0)

    def test_monotone_increasing(self):
        assert spearman_rank_correlation([1, 2, 3], [10, 20, 30]) == \
            pytest.approx(1.0)

    def test_constant_is_zero(self):
        assert spearman_rank_correlation([1, 2, 3], [5, 5, 5]) == 0.0


class TestDrift:
    def test_truth_reconstruction_has_zero_errors(self):
        cfg = eval_cfg()
        surface, centers = control_point_surface(cfg, travel_mm=30.0)
        pts_px = [(cx / 0.25, cy / 0.25) for cx, cy in centers]
        report = drift_metrics(surface, pts_px, 0.25, centers)
        assert report.distance_mae_mm < 0.02
        assert report.angle_mae_deg < 0.05
        assert len(report.segments) == 36

    def test_translation_invariance(self):
        cfg = eval_cfg()
        surface, centers = control_point_surface(cfg, travel_mm=30.0)
        shifted = HeightField(surface.data[:, 40:], 0.25)
        pts_px = [(cx / 0.25 - 40, cy / 0.25) for cx, cy in centers]
        report = drift_metrics(shifted, pts_px, 0.25, centers)
        assert report.distance_mae_mm < 0.02
        assert report.angle_mae_deg < 0.05

    def test_unlocatable_point_reports_position(self):
        cfg = eval_cfg()
        flat = HeightField(np.zeros((160, 300)), 0.25)
        with pytest.raises(DegenerateInputError) as err:
            locate_bump(flat, (150.0, 80.0))
        assert "150" in str(err.value)

    def test_rotation_equivariance_of_angle_errors(self):
        # rotating the reference layout shifts every segment angle error
        # by the rotation while distances stay put
        cfg = eval_cfg()
        surface, centers = control_point_surface(cfg, travel_mm=30.0)
        pts_px = [(cx / 0.25, cy / 0.25) for cx, cy in centers]
        theta = np.radians(2.0)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        mid = np.mean(centers, axis=0)
        rotated = [tuple(rot @ (np.array(c) - mid) + mid) for c in centers]
        report = drift_metrics(surface, pts_px, 0.25, rotated)
        errs = [seg[5] for seg in report.segments]
        assert np.allclose(errs, 2.0, atol=0.06)
        assert report.distance_mae_mm < 0.02


class TestICP:
    def cloud(self, rng, n=150):
        return rng.uniform(-8.0, 8.0, size=(n, 3)) * np.array([1.0, 0.7, 0.3])

    def test_identity_for_equal_clouds(self, rng):
        pts = self.cloud(rng)
        result = icp_align(pts, pts)
        assert np.allclose(result.rotation, np.eye(3), atol=1e-9)
        assert np.allclose(result.translation, 0.0, atol=1e-9)
        assert result.final_residual < 1e-9

    def test_recovers_known_transform(self, rng):
        pts = self.cloud(rng)
        angle = np.radians(5.0)
        rot = np.array([[np.cos(angle), -np.sin(angle), 0.0],
                        [np.sin(angle), np.cos(angle), 0.0],
                        [0.0, 0.0, 1.0]])
        trans = np.array([1.0, 2.0, 0.5])
        target = pts @ rot.T + trans
        result = icp_align(pts, target)
        assert np.abs(result.rotation - rot).max() < 1e-3
        assert np.abs(result.translation - trans).max() < 1e-3
        assert result.final_residual < 1e-6

    def test_residual_non_increasing(self, rng):
        pts = self.cloud(rng, n=300)
        angle = np.radians(8.0)
        rot = np.array([[np.cos(angle), -np.sin(angle), 0.0],
                        [np.sin(angle), np.cos(angle), 0.0],
                        [0.0, 0.0, 1.0]])
        noisy = pts @ rot.T + np.array([0.5, -0.3, 0.2]) \
            + rng.normal(0, 0.02, pts.shape)
        result = icp_align(pts, noisy)
        diffs = np.diff(result.residuals)
        assert (diffs <= 1e-9).all()

    def test_degenerate_points_rejected(self, rng):
        line = np.stack([np.linspace(0, 1, 10)] * 3, axis=-1)
        with pytest.raises(DegenerateInputError):
            icp_align(line, line)
        with pytest.raises(InvalidInputError):
            icp_align(np.zeros((2, 3)), np.zeros((5, 3)))

    def test_report_writer(self, tmp_path, rng):
        pts = self.cloud(rng)
        result = icp_align(pts, pts)
        write_icp_report(tmp_path, result)
        assert (tmp_path / "icp_report.json").exists()


class TestDefectCompare:
    def pit_surface(self, depth=0.3):
        return make_surface(
            "defect", 75.0, 40.0, 0.25,
            features=[{"type": "pit", "center_mm": (37.5, 20.0),
                       "depth_mm": depth, "sigma_mm": 1.5}])

    def test_gaussian_pit_depth_recovered(self, quick_model):
        cfg = eval_cfg()
        report = defect_compare(self.pit_surface(), quick_model, cfg,
                                speed_mm_s=10.0, seed=0)
        true_depth = -report.truth_profile_mm.min() \
            + report.truth_profile_mm.max()
        rec_depth = -report.recon_profile_mm.min() \
            + report.recon_profile_mm.max()
        assert abs(rec_depth - true_depth) / true_depth < 0.15

    def test_flat_surface_null_case(self, quick_model):
        cfg = eval_cfg()
        flat = make_surface("flat", 75.0, 40.0, 0.25)
        report = defect_compare(flat, quick_model, cfg, speed_mm_s=10.0,
                                seed=1)
        assert report.rmse_mm < 0.04

    def test_step_edge_smoothed(self, quick_model):
        cfg = eval_cfg()
        step = make_surface(
            "defect", 75.0, 40.0, 0.25,
            features=[{"type": "step", "center_mm": (37.5, 20.0),
                       "depth_mm": 0.3, "half_width_mm": 4.0}])
        report = defect_compare(step, quick_model, cfg, speed_mm_s=10.0,
                                seed=2)

        def edge_width(profile):
            depth = profile.max() - profile.min()
            lo = profile.max() - 0.9 * depth
            hi = profile.max() - 0.1 * depth
            below = np.nonzero(profile < lo)[0]
            left = below.min()
            run = left
            while run > 0 and profile[run] < hi:
                run -= 1
            return left - run

        assert edge_width(report.recon_profile_mm) > \
            edge_width(report.truth_profile_mm)
