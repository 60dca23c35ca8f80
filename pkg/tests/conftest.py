"""Shared fixtures: trained models are expensive, so they are built once
per session and reused by module and acceptance tests."""

import time

import numpy as np
import pytest

from beltscan.calibration import (generate_calibration_set,
                                  train_gradient_regressor)
from beltscan.mlp import TrainConfig
from beltscan.simulator import SensorConfig


@pytest.fixture(scope="session")
def default_cfg():
    """Full-resolution sensor, zero noise (the calibration/grid setting)."""
    return SensorConfig(pixel_pitch_mm=0.1, noise_sigma=0.0)


@pytest.fixture(scope="session")
def noisy_cfg():
    return SensorConfig(pixel_pitch_mm=0.1, noise_sigma=2.0)


@pytest.fixture(scope="session")
def model_timing():
    return {}


@pytest.fixture(scope="session")
def default_model(default_cfg, model_timing):
    """Gradient regressor trained on the full 13x11 sphere-press protocol.

    Features are normalized, so the same model applies at any pixel pitch.
    """
    t0 = time.time()
    samples = generate_calibration_set(default_cfg, rows=13, cols=11,
                                       ball_radius_mm=4.0, seed=0)
    model_timing["calibration_s"] = time.time() - t0
    model_timing["n_samples"] = len(samples)
    t0 = time.time()
    model = train_gradient_regressor(samples, config=TrainConfig(epochs=200),
                                     seed=0)
    model_timing["training_s"] = time.time() - t0
    return model


@pytest.fixture(scope="session")
def quick_model():
    """Small, fast regressor for pipeline plumbing tests."""
    cfg = SensorConfig(pixel_pitch_mm=0.25, noise_sigma=0.0)
    samples = generate_calibration_set(cfg, rows=5, cols=4, seed=0,
                                       max_samples_per_press=300)
    return train_gradient_regressor(samples, config=TrainConfig(epochs=60),
                                    seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
