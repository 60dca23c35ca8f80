import numpy as np
import pytest

from beltscan.core import (GradientField, HeightField, Mask, NormalMap,
                           Pose2D, gradient_of, gradients_from_normals,
                           mean_dot_product, normal_from_gradients)
from beltscan.errors import EmptyMaskError, InvalidInputError


def constant_gradient_field(gx, gy, shape=(4, 5)):
    data = np.zeros((*shape, 2))
    data[..., 0] = gx
    data[..., 1] = gy
    return GradientField(data)


class TestNormalFromGradients:
    def test_flat(self):
        n = normal_from_gradients(constant_gradient_field(0.0, 0.0))
        assert np.allclose(n.data, [0.0, 0.0, -1.0])

    def test_unit_x_slope(self):
        n = normal_from_gradients(constant_gradient_field(1.0, 0.0))
        s = 1.0 / np.sqrt(2.0)
        assert np.allclose(n.data, [s, 0.0, -s])

    def test_three_four_slope(self):
        n = normal_from_gradients(constant_gradient_field(3.0, 4.0))
        assert np.allclose(n.data, np.array([3.0, 4.0, -1.0]) / np.sqrt(26.0))

    def test_unit_norm_for_random_inputs(self, rng):
        g = GradientField(rng.normal(scale=5.0, size=(16, 16, 2)))
        n = normal_from_gradients(g)
        norms = np.linalg.norm(n.data, axis=-1)
        assert np.abs(norms - 1.0).max() < 1e-6
        assert (n.data[..., 2] < 0).all()

    def test_rejects_non_finite(self):
        data = np.zeros((3, 3, 2))
        data[1, 1, 0] = np.nan
        with pytest.raises(InvalidInputError):
            normal_from_gradients(data)

    def test_gradient_round_trip(self, rng):
        g = GradientField(rng.normal(scale=2.0, size=(8, 8, 2)))
        back = gradients_from_normals(normal_from_gradients(g))
        assert np.allclose(back.data, g.data, atol=1e-12)


class TestMeanDotProduct:
    def test_identical_maps(self, rng):
        n = normal_from_gradients(
            GradientField(rng.normal(size=(6, 7, 2))))
        mask = Mask(np.ones((6, 7), dtype=bool))
        assert mean_dot_product(n, n, mask) == pytest.approx(1.0)

    def test_flipped_maps(self, rng):
        n = normal_from_gradients(GradientField(rng.normal(size=(5, 5, 2))))
        mask = Mask(np.ones((5, 5), dtype=bool))
        assert mean_dot_product(n, -n.data, mask) == pytest.approx(-1.0)

    def test_ten_degree_tilt(self):
        flat = normal_from_gradients(constant_gradient_field(0.0, 0.0))
        a = np.radians(10.0)
        tilted = np.zeros((4, 5, 3))
        tilted[...] = (np.sin(a), 0.0, -np.cos(a))
        mask = Mask(np.ones((4, 5), dtype=bool))
        assert mean_dot_product(flat, tilted, mask) == \
            pytest.approx(np.cos(a), abs=1e-12)

    def test_symmetric_in_maps(self, rng):
        a = normal_from_gradients(GradientField(rng.normal(size=(5, 6, 2))))
        b = normal_from_gradients(GradientField(rng.normal(size=(5, 6, 2))))
        mask = Mask(rng.random((5, 6)) > 0.4)
        assert mean_dot_product(a, b, mask) == \
            pytest.approx(mean_dot_product(b, a, mask))

    def test_empty_mask_raises(self, rng):
        n = normal_from_gradients(GradientField(rng.normal(size=(4, 4, 2))))
        with pytest.raises(EmptyMaskError):
            mean_dot_product(n, n, Mask(np.zeros((4, 4), dtype=bool)))

    def test_dimension_mismatch(self, rng):
        a = normal_from_gradients(GradientField(rng.normal(size=(4, 4, 2))))
        b = normal_from_gradients(GradientField(rng.normal(size=(4, 5, 2))))
        with pytest.raises(InvalidInputError):
            mean_dot_product(a, b, Mask(np.ones((4, 4), dtype=bool)))


class TestGradientOf:
    def test_constant_surface(self):
        h = HeightField(np.full((8, 8), 3.5), 0.2)
        assert np.allclose(gradient_of(h).data, 0.0)

    def test_plane(self):
        pitch = 0.25
        a = 0.7
        x = np.arange(10) * pitch
        h = HeightField(np.tile(a * x, (6, 1)), pitch)
        g = gradient_of(h)
        assert np.allclose(g.data[..., 0], a, atol=1e-12)
        assert np.allclose(g.data[..., 1], 0.0, atol=1e-12)

    def test_sinusoid_matches_analytic_derivative(self):
        # truncation of central differences is O(pitch^2)
        pitch = 0.05
        length = 8.0
        x = np.arange(256) * pitch
        h = HeightField(np.tile(np.sin(2 * np.pi * x / length), (8, 1)),
                        pitch)
        g = gradient_of(h)
        expected = (2 * np.pi / length) * np.cos(2 * np.pi * x / length)
        err = np.abs(g.data[3, 1:-1, 0] - expected[1:-1]).max()
        assert err < (2 * np.pi / length) ** 3 * pitch ** 2

    def test_too_small_grid(self):
        with pytest.raises(InvalidInputError):
            gradient_of(HeightField(np.zeros((2, 5)), 0.1))


class TestTypes:
    def test_height_field_validation(self):
        with pytest.raises(InvalidInputError):
            HeightField(np.zeros((4, 4)), 0.0)
        with pytest.raises(InvalidInputError):
            HeightField(np.full((4, 4), np.inf), 0.1)

    def test_normal_map_rejects_non_unit(self):
        data = np.zeros((2, 2, 3))
        data[..., 2] = -0.5
        with pytest.raises(InvalidInputError):
            NormalMap(data)

    def test_normal_map_rejects_positive_z(self):
        data = np.zeros((2, 2, 3))
        data[..., 2] = 1.0
        with pytest.raises(InvalidInputError):
            NormalMap(data)

    def test_immutability(self):
        h = HeightField(np.zeros((4, 4)), 0.1)
        with pytest.raises(ValueError):
            h.data[0, 0] = 1.0

    def test_pose_addition(self):
        p = Pose2D(1.0, 2.0) + Pose2D(0.5, -1.0)
        assert p == Pose2D(1.5, 1.0)
