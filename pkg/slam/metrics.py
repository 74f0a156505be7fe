"""Mapping and localization metrics: GOSPA with decomposition, UE error summaries."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from slam.assignment import solve_assignment
from slam.errors import LengthMismatch
from slam.geometry import LANDMARK_DIM, MAP_KINDS, LandmarkKind
from slam.pmb import PmbMap
from slam.schemas import GospaConfig
from slam.utils.angles import wrap_angle


@dataclass(frozen=True)
class GospaResult:
    """GOSPA distance and its parts, all in meters.

    total**p == localization**p + missed**p + false**p.
    """

    total: float
    localization: float
    missed: float
    false: float
    n_missed: int = 0
    n_false: int = 0


def _points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return np.zeros((0, LANDMARK_DIM))
    return np.atleast_2d(arr)


def gospa(truth, estimate, cfg: GospaConfig | None = None) -> GospaResult:
    """GOSPA distance between two finite point sets.

    A pair is only matched when its distance is below the cutoff; a pair at or
    beyond the cutoff costs the same as one missed plus one false point when
    alpha = 2, so such pairs are scored as unmatched.
    """
    cfg = cfg or GospaConfig()
    c, p, alpha = cfg.cutoff, cfg.p, cfg.alpha
    X, Y = _points(truth), _points(estimate)
    n, m = X.shape[0], Y.shape[0]
    penalty = c**p / alpha

    loc_p = 0.0
    matched = 0
    if n and m:
        transpose = n > m
        A, B = (Y, X) if transpose else (X, Y)
        d = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
        close = d < c
        cost = np.where(close, d**p, 2.0 * penalty)
        cols, _ = solve_assignment(cost)
        for i, j in enumerate(cols):
            if close[i, j]:
                loc_p += float(d[i, j] ** p)
                matched += 1

    n_missed = n - matched
    n_false = m - matched
    missed_p = penalty * n_missed
    false_p = penalty * n_false
    total_p = loc_p + missed_p + false_p
    return GospaResult(
        total=float(total_p ** (1.0 / p)),
        localization=float(loc_p ** (1.0 / p)),
        missed=float(missed_p ** (1.0 / p)),
        false=float(false_p ** (1.0 / p)),
        n_missed=n_missed,
        n_false=n_false,
    )


def extract_map_estimate(pmb_map: PmbMap, r_threshold: float = 0.5) -> dict[LandmarkKind, np.ndarray]:
    """MAP-kind mean positions of Bernoullis with existence >= r_threshold, per kind."""
    if not 0.0 < r_threshold < 1.0:
        raise ValueError(f"r_threshold must be in (0, 1), got {r_threshold}")
    points: dict[LandmarkKind, list[np.ndarray]] = {k: [] for k in MAP_KINDS}
    for b in pmb_map.bernoullis:
        if b.existence >= r_threshold:
            points[b.map_kind].append(b.map_density.mean)
    return {k: (np.vstack(v) if v else np.zeros((0, LANDMARK_DIM))) for k, v in points.items()}


def ue_errors(estimate, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-step UE errors: horizontal position [m], |heading| [deg], |bias| [m].

    Raises:
        LengthMismatch: different number of steps.
    """
    est = np.atleast_2d(np.asarray(estimate, dtype=float))
    ref = np.atleast_2d(np.asarray(truth, dtype=float))
    if est.shape != ref.shape:
        raise LengthMismatch(f"estimate {est.shape} vs truth {ref.shape}")
    pos = np.hypot(est[:, 0] - ref[:, 0], est[:, 1] - ref[:, 1])
    heading = np.abs(np.degrees(wrap_angle(est[:, 3] - ref[:, 3])))
    bias = np.abs(est[:, 4] - ref[:, 4])
    return pos, np.atleast_1d(heading), bias


@dataclass(frozen=True)
class UeErrorSummary:
    """RMSE plus filter-reported and empirical standard deviations."""

    pos_rmse: float
    heading_rmse_deg: float
    bias_rmse: float
    pos_std: float | None = None
    heading_std_deg: float | None = None
    bias_std: float | None = None
    pos_std_empirical: float | None = None
    heading_std_empirical_deg: float | None = None
    bias_std_empirical: float | None = None


def _empirical_std(residuals: np.ndarray) -> np.ndarray | None:
    """Time-averaged std across runs of (runs, steps, 4) residuals [dx, dy, dheading, dbias]."""
    if residuals.shape[0] < 2:
        return None
    return residuals.std(axis=0, ddof=1).mean(axis=0)


def ue_error_summary(estimates: Sequence, truths: Sequence, stds: Sequence | None = None) -> UeErrorSummary:
    """Summarize UE accuracy over runs.

    Args:
        estimates: Per run, (steps, 5) posterior means.
        truths: Per run, (steps, 5) true states (aligned with estimates).
        stds: Optional per run (steps, 5) filter posterior standard deviations.

    Raises:
        LengthMismatch: runs or steps do not line up.
    """
    if len(estimates) != len(truths) or (stds is not None and len(stds) != len(estimates)):
        raise LengthMismatch(f"{len(estimates)} estimate runs vs {len(truths)} truth runs")
    if not estimates:
        raise LengthMismatch("no runs to summarize")

    residuals = []
    for est, ref in zip(estimates, truths):
        est = np.atleast_2d(np.asarray(est, dtype=float))
        ref = np.atleast_2d(np.asarray(ref, dtype=float))
        if est.shape != ref.shape:
            raise LengthMismatch(f"estimate {est.shape} vs truth {ref.shape}")
        residuals.append(
            np.column_stack([
                est[:, 0] - ref[:, 0],
                est[:, 1] - ref[:, 1],
                np.degrees(wrap_angle(est[:, 3] - ref[:, 3])),
                est[:, 4] - ref[:, 4],
            ])
        )
    flat = np.vstack(residuals)
    pos_rmse = float(np.sqrt(np.mean(flat[:, 0] ** 2 + flat[:, 1] ** 2)))
    heading_rmse = float(np.sqrt(np.mean(flat[:, 2] ** 2)))
    bias_rmse = float(np.sqrt(np.mean(flat[:, 3] ** 2)))

    reported: dict[str, float | None] = {"pos_std": None, "heading_std_deg": None, "bias_std": None}
    if stds is not None:
        s = np.vstack([np.atleast_2d(np.asarray(x, dtype=float)) for x in stds])
        if s.shape[0] != flat.shape[0]:
            raise LengthMismatch(f"{s.shape[0]} std rows vs {flat.shape[0]} estimate rows")
        reported = {
            "pos_std": float(np.mean(np.hypot(s[:, 0], s[:, 1]))),
            "heading_std_deg": float(np.degrees(np.mean(s[:, 3]))),
            "bias_std": float(np.mean(s[:, 4])),
        }

    empirical: dict[str, float | None] = {
        "pos_std_empirical": None,
        "heading_std_empirical_deg": None,
        "bias_std_empirical": None,
    }
    if len({r.shape for r in residuals}) == 1:
        spread = _empirical_std(np.stack(residuals))
        if spread is not None:
            empirical = {
                "pos_std_empirical": float(np.hypot(spread[0], spread[1])),
                "heading_std_empirical_deg": float(spread[2]),
                "bias_std_empirical": float(spread[3]),
            }

    return UeErrorSummary(pos_rmse, heading_rmse, bias_rmse, **reported, **empirical)
