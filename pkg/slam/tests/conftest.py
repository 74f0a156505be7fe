"""
Pytest Configuration and Shared Fixtures for SLAM Tests

This conftest.py provides:
- isolated settings: SLAM_LOGS_DIR / SLAM_OUT_DIR redirected to tmp_path
- sensor, bs_position: default sensor model and BS location
- default_scenario / minimal_scenario_path: the shipped scenario files
- rng: seeded counter-based generator
- quadratic_setup: the scalar quadratic example (prior, noise, measurement)
"""
import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent.parent
sys.path.insert(0, str(REPO_ROOT))

from slam.config import load_scenario  # noqa: E402
from slam.gaussian import GaussianDensity  # noqa: E402
from slam.geometry import SensorModel  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Keep logs, metrics and run outputs inside the test's tmp dir."""
    monkeypatch.setenv("SLAM_LOGS_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("SLAM_OUT_DIR", str(tmp_path / "runs"))
    monkeypatch.delenv("SLAM_METRICS_ENABLED", raising=False)
    monkeypatch.delenv("SLAM_RECORD_TIMING", raising=False)
    monkeypatch.delenv("SLAM_WORKERS", raising=False)
    yield tmp_path


@pytest.fixture
def repo_root() -> Path:
    return REPO_ROOT


@pytest.fixture
def sensor() -> SensorModel:
    return SensorModel()


@pytest.fixture
def bs_position() -> np.ndarray:
    return np.array([0.0, 0.0, 10.0])


@pytest.fixture
def default_scenario():
    return load_scenario(REPO_ROOT / "rules" / "scenario.yaml")


@pytest.fixture
def minimal_scenario_path() -> Path:
    return REPO_ROOT / "config" / "scenarios" / "minimal.yaml"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(12345))


@pytest.fixture
def quadratic_setup():
    """h(x) = -0.1 x^2 + 3, R = 0.1, prior N(3, 4), z = 0.5."""
    def h(points):
        return -0.1 * np.asarray(points, dtype=float) ** 2 + 3.0

    prior = GaussianDensity(np.array([3.0]), np.array([[4.0]]))
    return h, prior, np.array([[0.1]]), np.array([0.5])
