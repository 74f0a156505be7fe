"""5G downlink geometric measurement model.

Maps a UE state and a landmark to the channel parameters [TOA, AOA, AOD],
inverts that map for landmark birth, and describes the sensor (detection,
field of view, clutter).

Conventions:
    - TOA is expressed as path length in meters (delay x speed of light) and
      includes the clock bias B, also in meters.
    - The BS frame is aligned with the global frame. The UE frame is the global
      frame rotated by the heading about the vertical axis (no pitch/roll).
    - A VA landmark stores the mirror image of the BS across its reflecting
      plane, so the plane is the perpendicular bisector of BS and VA.
    - Angle pairs are (azimuth, elevation); azimuth in (-pi, pi], elevation in
      [-pi/2, pi/2].

All batch functions work on a leading point axis so the cubature rule can
evaluate every point in one call.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from slam.errors import (
    DegenerateGeometry,
    DimensionMismatch,
    MisplacedBaseStation,
    NoPhysicalSolution,
    UnsupportedKind,
)
from slam.utils.angles import wrap_angle

UE_DIM = 5
LANDMARK_DIM = 3
MEASUREMENT_DIM = 5
# [toa, aoa_az, aoa_el, aod_az, aod_el]
CIRCULAR_MASK = np.array([False, True, True, True, True])
_MIN_LENGTH = 1e-9


class LandmarkKind(str, Enum):
    """Landmark type: base station, virtual anchor or scatter point."""

    BS = "BS"
    VA = "VA"
    SP = "SP"


# Kinds carried by map Bernoullis; the BS is known and never mapped.
MAP_KINDS: tuple[LandmarkKind, ...] = (LandmarkKind.VA, LandmarkKind.SP)


@dataclass(frozen=True, eq=False)
class UEState:
    """UE position [m], heading [rad] and clock bias [m]."""

    position: np.ndarray
    heading: float = 0.0
    clock_bias: float = 0.0

    def __post_init__(self):
        position = np.asarray(self.position, dtype=float).reshape(-1)
        if position.shape != (3,):
            raise DimensionMismatch(f"UE position must be a 3-vector, got {position.shape}")
        position.setflags(write=False)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        object.__setattr__(self, "clock_bias", float(self.clock_bias))

    def to_vector(self) -> np.ndarray:
        return np.array([*self.position, self.heading, self.clock_bias])

    @classmethod
    def from_vector(cls, s) -> UEState:
        s = np.asarray(s, dtype=float).reshape(-1)
        if s.shape != (UE_DIM,):
            raise DimensionMismatch(f"UE state vector must have {UE_DIM} entries, got {s.shape}")
        return cls(position=s[:3], heading=s[3], clock_bias=s[4])


@dataclass(frozen=True, eq=False)
class Landmark:
    """Point landmark with its kind."""

    position: np.ndarray
    kind: LandmarkKind

    def __post_init__(self):
        position = np.asarray(self.position, dtype=float).reshape(-1)
        if position.shape != (3,):
            raise DimensionMismatch(f"landmark position must be a 3-vector, got {position.shape}")
        position.setflags(write=False)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "kind", LandmarkKind(self.kind))


@dataclass(frozen=True, eq=False)
class Measurement:
    """One channel-parameter measurement: TOA [m], AOA and AOD (azimuth, elevation) [rad]."""

    toa: float
    aoa: np.ndarray
    aod: np.ndarray

    def __post_init__(self):
        aoa = np.asarray(self.aoa, dtype=float).reshape(-1)
        aod = np.asarray(self.aod, dtype=float).reshape(-1)
        if aoa.shape != (2,) or aod.shape != (2,):
            raise DimensionMismatch("AOA and AOD must be (azimuth, elevation) pairs")
        aoa = np.array([wrap_angle(aoa[0]), aoa[1]])
        aod = np.array([wrap_angle(aod[0]), aod[1]])
        aoa.setflags(write=False)
        aod.setflags(write=False)
        object.__setattr__(self, "toa", float(self.toa))
        object.__setattr__(self, "aoa", aoa)
        object.__setattr__(self, "aod", aod)

    def to_vector(self) -> np.ndarray:
        return np.array([self.toa, self.aoa[0], self.aoa[1], self.aod[0], self.aod[1]])

    @classmethod
    def from_vector(cls, z) -> Measurement:
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.shape != (MEASUREMENT_DIM,):
            raise DimensionMismatch(f"measurement vector must have {MEASUREMENT_DIM} entries")
        return cls(toa=z[0], aoa=z[1:3], aod=z[3:5])


class SensorModel(BaseModel):
    """Detection, field-of-view, clutter and noise parameters.

    The defaults are labeled defaults for the desk-scale scenario, not values
    of any published experiment.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    detection_prob: float = Field(default=0.9, ge=0.0, le=1.0, description="p_D inside the FoV")
    fov_radius_sp: float = Field(default=50.0, gt=0.0, description="SP visibility radius [m]")
    clutter_rate: float = Field(default=1.0, ge=0.0, description="Expected clutter count per scan")
    toa_max: float = Field(default=100.0, gt=0.0, description="Upper TOA bound of the measurement space [m]")
    noise_std: tuple[float, float, float, float, float] = Field(
        default=(0.1, 0.01, 0.01, 0.01, 0.01),
        description="Std of [toa m, aoa_az, aoa_el, aod_az, aod_el rad]",
    )

    @field_validator("noise_std")
    @classmethod
    def _nonnegative_std(cls, v):
        if any(s < 0 for s in v):
            raise ValueError("noise_std entries must be >= 0")
        return v

    @property
    def noise_cov(self) -> np.ndarray:
        return np.diag(np.square(np.asarray(self.noise_std, dtype=float)))

    @property
    def measurement_volume(self) -> float:
        """Volume of [0, toa_max] x (az, el) x (az, el) boxes."""
        angle_box = (2.0 * np.pi) * np.pi
        return self.toa_max * angle_box * angle_box

    @property
    def clutter_density(self) -> float:
        """Uniform clutter intensity c(z) = clutter_rate / volume."""
        return self.clutter_rate / self.measurement_volume


# --- vectorized core ---------------------------------------------------------

def _angles(v: np.ndarray) -> np.ndarray:
    az = np.arctan2(v[:, 1], v[:, 0])
    el = np.arctan2(v[:, 2], np.hypot(v[:, 0], v[:, 1]))
    return np.stack([az, el], axis=1)


def _unit(az: np.ndarray, el: np.ndarray) -> np.ndarray:
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=1)


def _rotate_z(v: np.ndarray, angle: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([c * v[:, 0] - s * v[:, 1], s * v[:, 0] + c * v[:, 1], v[:, 2]], axis=1)


def _norm(v: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v, axis=1)
    if np.any(n < _MIN_LENGTH):
        raise DegenerateGeometry(f"zero-length {what} direction")
    return n


def _va_incidence_point(va: np.ndarray, ue_pos: np.ndarray, bs: np.ndarray) -> np.ndarray:
    """Intersection of segment VA->UE with the mirror plane of BS and VA."""
    axis = va - bs
    normal = axis / _norm(axis, "BS-VA")[:, None]
    mid = 0.5 * (va + bs)
    denom = np.sum(normal * (ue_pos - va), axis=1)
    if np.any(np.abs(denom) < _MIN_LENGTH):
        raise DegenerateGeometry("UE lies on the VA mirror plane")
    t = np.sum(normal * (mid - va), axis=1) / denom
    return va + t[:, None] * (ue_pos - va)


def measure_batch(kind: LandmarkKind, ue: np.ndarray, landmark: np.ndarray | None, bs_position) -> np.ndarray:
    """Noiseless measurements for a batch of (UE state, landmark position) pairs.

    Args:
        kind: Landmark kind.
        ue: (N, 5) UE states [x, y, z, heading, bias].
        landmark: (N, 3) landmark positions (ignored for the BS).
        bs_position: Known BS position (3,).

    Returns:
        (N, 5) array [toa, aoa_az, aoa_el, aod_az, aod_el].

    Raises:
        DegenerateGeometry: zero-length direction vector.
    """
    ue = np.atleast_2d(ue)
    bs = np.asarray(bs_position, dtype=float).reshape(1, 3)
    pos, heading, bias = ue[:, :3], ue[:, 3], ue[:, 4]

    if kind == LandmarkKind.BS:
        d = pos - bs
        toa = _norm(d, "BS-UE") + bias
        aod = _angles(d)
        aoa = _angles(_rotate_z(-d, -heading))
    else:
        lm = np.atleast_2d(landmark)
        if kind == LandmarkKind.SP:
            out = lm - bs
            back = lm - pos
            toa = _norm(out, "BS-SP") + _norm(back, "UE-SP") + bias
            aod = _angles(out)
            aoa = _angles(_rotate_z(back, -heading))
        elif kind == LandmarkKind.VA:
            back = lm - pos
            toa = _norm(back, "UE-VA") + bias
            q = _va_incidence_point(lm, pos, bs)
            aoa = _angles(_rotate_z(q - pos, -heading))
            aod = _angles(q - bs)
        else:
            raise UnsupportedKind(f"unknown landmark kind {kind}")
    return np.column_stack([toa, aoa, aod])


def invert_measurement_batch(kind: LandmarkKind, z: np.ndarray, ue: np.ndarray, bs_position) -> np.ndarray:
    """Landmark positions consistent with TOA and AOA of each measurement.

    Raises:
        NoPhysicalSolution: any row has no positive-range solution.
        UnsupportedKind: kind is BS.
    """
    z = np.atleast_2d(z)
    ue = np.atleast_2d(ue)
    bs = np.asarray(bs_position, dtype=float).reshape(1, 3)
    pos, heading, bias = ue[:, :3], ue[:, 3], ue[:, 4]
    u = _rotate_z(_unit(z[:, 1], z[:, 2]), heading)
    path = z[:, 0] - bias
    if np.any(path <= 0.0):
        raise NoPhysicalSolution("TOA minus clock bias is not a positive range")

    if kind == LandmarkKind.VA:
        return pos + path[:, None] * u
    if kind == LandmarkKind.SP:
        # |w + d u| = L - d  =>  d = (L^2 - |w|^2) / (2 (u.w + L))
        w = pos - bs
        denom = 2.0 * (np.sum(u * w, axis=1) + path)
        num = path ** 2 - np.sum(w * w, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = num / denom
        if np.any(denom <= 0.0) or np.any(~np.isfinite(d)) or np.any(d <= 0.0) or np.any(d >= path):
            raise NoPhysicalSolution("no positive UE-SP range matches the TOA")
        return pos + d[:, None] * u
    raise UnsupportedKind(f"cannot invert a measurement for kind {kind}")


# --- scalar API ----------------------------------------------------------------

def measure(landmark: Landmark, ue: UEState, bs_position) -> Measurement:
    """Noiseless measurement h(x, s) of `landmark` seen from `ue`.

    Raises:
        MisplacedBaseStation: a BS landmark that is not at `bs_position`.
    """
    if landmark.kind == LandmarkKind.BS and not np.allclose(
        landmark.position, np.asarray(bs_position, dtype=float), rtol=0.0, atol=1e-9
    ):
        raise MisplacedBaseStation(f"BS landmark at {landmark.position}, expected {bs_position}")
    lm = None if landmark.kind == LandmarkKind.BS else landmark.position[None, :]
    z = measure_batch(landmark.kind, ue.to_vector()[None, :], lm, bs_position)[0]
    return Measurement.from_vector(z)


def invert_measurement(z: Measurement, ue: UEState, kind: LandmarkKind, bs_position) -> np.ndarray:
    """Landmark position that would produce `z` from `ue` (VA or SP)."""
    return invert_measurement_batch(
        LandmarkKind(kind), z.to_vector()[None, :], ue.to_vector()[None, :], bs_position
    )[0]


@dataclass(frozen=True, eq=False)
class StackedMeasurementFunction:
    """Joint measurement function over [UE(5) | landmark_1(3) | ... ].

    `kinds` lists the landmark of every measurement block in output order. BS
    entries use only the UE block; every other entry owns the next 3-dim
    landmark block of the joint state, in order.
    """

    kinds: tuple[LandmarkKind, ...]
    bs_position: np.ndarray
    ue_dim: int = UE_DIM
    slots: tuple[int | None, ...] = field(init=False)

    def __post_init__(self):
        if self.ue_dim != UE_DIM:
            raise DimensionMismatch(f"UE block must have {UE_DIM} entries, got {self.ue_dim}")
        kinds = tuple(LandmarkKind(k) for k in self.kinds)
        slots: list[int | None] = []
        offset = self.ue_dim
        for k in kinds:
            if k == LandmarkKind.BS:
                slots.append(None)
            else:
                slots.append(offset)
                offset += LANDMARK_DIM
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "slots", tuple(slots))
        object.__setattr__(self, "bs_position", np.asarray(self.bs_position, dtype=float).reshape(3))

    @property
    def state_dim(self) -> int:
        return self.ue_dim + LANDMARK_DIM * sum(s is not None for s in self.slots)

    @property
    def output_dim(self) -> int:
        return MEASUREMENT_DIM * len(self.kinds)

    @property
    def circular_mask(self) -> np.ndarray:
        return np.tile(CIRCULAR_MASK, len(self.kinds))

    def __call__(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        single = states.ndim == 1
        states = np.atleast_2d(states)
        if states.shape[1] != self.state_dim:
            raise DimensionMismatch(
                f"joint state has {states.shape[1]} entries, layout needs {self.state_dim}"
            )
        ue = states[:, : self.ue_dim]
        blocks = []
        for kind, slot in zip(self.kinds, self.slots):
            lm = None if slot is None else states[:, slot : slot + LANDMARK_DIM]
            blocks.append(measure_batch(kind, ue, lm, self.bs_position))
        out = np.hstack(blocks) if blocks else np.zeros((states.shape[0], 0))
        return out[0] if single else out


def stacked_measurement_fn(ue_dim: int, landmarks: Sequence[LandmarkKind], bs_position) -> StackedMeasurementFunction:
    """Build the joint measurement function for an ordered list of landmark kinds."""
    return StackedMeasurementFunction(kinds=tuple(landmarks), bs_position=bs_position, ue_dim=ue_dim)


def detection_probability(kind: LandmarkKind, landmark_position, ue_position, sensor: SensorModel) -> float:
    """p_D for a landmark of `kind`: sensor p_D inside the FoV, 0 outside."""
    visible = kind != LandmarkKind.SP or (
        np.linalg.norm(np.asarray(landmark_position, dtype=float) - np.asarray(ue_position, dtype=float))
        <= sensor.fov_radius_sp
    )
    return sensor.detection_prob if visible else 0.0


def in_fov(landmark: Landmark, ue: UEState, sensor: SensorModel) -> bool:
    """BS and VAs are always visible; an SP only within fov_radius_sp of the UE."""
    if landmark.kind != LandmarkKind.SP:
        return True
    return bool(np.linalg.norm(landmark.position - ue.position) <= sensor.fov_radius_sp)
