"""Angle helpers shared by the measurement model and the filters."""
from __future__ import annotations

import numpy as np


def wrap_angle(x):
    """Wrap angle(s) in radians to (-pi, pi].

    Works on scalars and arrays alike.

    Examples:
        >>> wrap_angle(3 * np.pi / 2)
        -1.5707963267948966
        >>> wrap_angle(-np.pi)
        3.141592653589793
    """
    wrapped = np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def wrap_residual(residual: np.ndarray, circular_mask: np.ndarray | None) -> np.ndarray:
    """Wrap the circular components of a residual (last axis) to (-pi, pi]."""
    residual = np.array(residual, dtype=float, copy=True)
    if circular_mask is None:
        return residual
    mask = np.asarray(circular_mask, dtype=bool)
    if not mask.any():
        return residual
    residual[..., mask] = wrap_angle(residual[..., mask])
    return residual


def align_circular(values: np.ndarray, reference: np.ndarray, circular_mask: np.ndarray | None) -> np.ndarray:
    """Shift circular components of `values` by multiples of 2*pi to lie within pi of `reference`.

    Used before averaging angles so that points straddling the +-pi cut are not
    averaged across it.
    """
    values = np.array(values, dtype=float, copy=True)
    if circular_mask is None:
        return values
    mask = np.asarray(circular_mask, dtype=bool)
    if not mask.any():
        return values
    ref = np.asarray(reference, dtype=float)[..., mask]
    values[..., mask] = ref + wrap_angle(values[..., mask] - ref)
    return values


def fold_direction(azimuth, elevation) -> tuple[np.ndarray, np.ndarray]:
    """Same directions with elevations in [-pi/2, pi/2] and azimuths in (-pi, pi].

    An elevation past a pole is mirrored back and its azimuth turned by pi.
    """
    el = np.asarray(wrap_angle(elevation), dtype=float)
    over = np.abs(el) > np.pi / 2.0
    el = np.where(over, np.sign(el) * np.pi - el, el)
    az = np.asarray(wrap_angle(np.where(over, np.asarray(azimuth, dtype=float) + np.pi, azimuth)), dtype=float)
    return az, el
