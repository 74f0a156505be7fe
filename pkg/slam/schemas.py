"""Pydantic schemas for scenario files.

Every section forbids unknown keys so typos in a scenario YAML surface as
validation errors instead of silently falling back to defaults.
"""
from __future__ import annotations

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from slam.geometry import SensorModel
from slam.linearization import IplfOptions, Linearizer
from slam.pmb import PruneOptions

Vec3 = tuple[float, float, float]
Vec5 = tuple[float, float, float, float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PlaneConfig(_Section):
    """Reflecting plane through `point` with normal `normal`."""

    point: Vec3
    normal: Vec3


class TrajectoryConfig(_Section):
    """Counterclockwise constant-turn-rate trajectory."""

    speed: float = Field(default=2.0 * np.pi, ge=0.0, description="Ground speed [m/s]")
    turn_rate: float = Field(default=np.pi / 10.0, description="Heading rate [rad/s]")
    initial_position: Vec3 = (20.0, 0.0, 0.0)
    initial_heading: float = Field(default=np.pi / 2.0, description="Direction of travel [rad]")
    initial_clock_bias: float = Field(default=0.0, description="Clock bias [m]")
    steps: int = Field(default=40, ge=1)
    step_duration: float = Field(default=0.5, gt=0.0, description="Seconds per step")


class PppConfig(_Section):
    """Uniform birth intensity per kind over a box."""

    region_min: Vec3 = (-80.0, -80.0, -10.0)
    region_max: Vec3 = (80.0, 80.0, 30.0)
    rate_va: float = Field(default=4.0, ge=0.0)
    rate_sp: float = Field(default=4.0, ge=0.0)

    @model_validator(mode="after")
    def _nonempty_region(self):
        if any(hi <= lo for lo, hi in zip(self.region_min, self.region_max)):
            raise ValueError("region_max must exceed region_min on every axis")
        return self


class FilterConfig(_Section):
    """k-best count, linearizer and housekeeping thresholds of the SLAM filter."""

    gamma: int = Field(default=10, ge=1, description="Number of best data associations kept per step")
    linearizer: Linearizer = Linearizer.POSTERIOR
    iplf: IplfOptions = IplfOptions()
    gate_threshold: float = Field(default=40.0, gt=0.0, description="Squared Mahalanobis gate")
    prune: PruneOptions = PruneOptions()
    r_estimate: float = Field(default=0.5, gt=0.0, lt=1.0, description="Existence threshold for map estimates")


class GospaConfig(_Section):
    """GOSPA cutoff c [m], order p and alpha."""

    cutoff: float = Field(default=20.0, gt=0.0)
    p: float = Field(default=2.0, ge=1.0)
    alpha: float = Field(default=2.0, gt=0.0, le=2.0)


class ScenarioConfig(_Section):
    """Complete description of one experiment."""

    version: int = 1
    metadata: dict[str, str | int | float] = Field(
        default_factory=dict, description="Radio parameters recorded for reference only"
    )
    seed: int = Field(default=0, ge=0)
    bs_position: Vec3 = (0.0, 0.0, 10.0)
    va_planes: tuple[PlaneConfig, ...] = ()
    sp_positions: tuple[Vec3, ...] = ()
    trajectory: TrajectoryConfig = TrajectoryConfig()
    sensor: SensorModel = SensorModel()
    motion_noise_std: Vec5 = (0.2, 0.2, 0.01, 0.0087, 0.2)
    prior_std: Vec5 = (0.3, 0.3, 0.3, 0.3, 0.3)
    ppp: PppConfig = PppConfig()
    filter: FilterConfig = FilterConfig()
    gospa: GospaConfig = GospaConfig()

    @field_validator("motion_noise_std", "prior_std")
    @classmethod
    def _nonnegative(cls, v):
        if any(s < 0 for s in v):
            raise ValueError("standard deviations must be >= 0")
        return v
