"""Ground truth, measurement simulation and seeded Monte Carlo runs."""
from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from slam.errors import DegeneratePlane, SlamError
from slam.filter import ConstantTurnTransition, constant_turn_motion, initial_state, step
from slam.geometry import CIRCULAR_MASK, MAP_KINDS, Landmark, LandmarkKind, SensorModel, UEState, in_fov, measure
from slam.metrics import extract_map_estimate, gospa, ue_errors
from slam.pmb import PmbMap, PppIntensity
from slam.schemas import ScenarioConfig
from slam.utils.angles import fold_direction, wrap_residual
from slam.utils.audit import record_metric, track_latency

logger = logging.getLogger(__name__)

# [toa, aoa_az, aoa_el, aod_az, aod_el]
AZIMUTHS = [1, 3]
ELEVATIONS = [2, 4]

# Per-step CSV columns, in output order.
STEP_COLUMNS = (
    "step",
    "gospa_va",
    "gospa_sp",
    "pos_err",
    "heading_err",
    "bias_err",
    "iplf_iters",
    "step_ms",
    "predict_ms",
    "update_ms",
)


def mirror_point(point, plane_point, normal) -> np.ndarray:
    """Mirror image of `point` across the plane through `plane_point` with `normal`.

    Raises:
        DegeneratePlane: zero normal, or `point` on the plane.
    """
    n = np.asarray(normal, dtype=float)
    norm = np.linalg.norm(n)
    if norm < 1e-9:
        raise DegeneratePlane(f"plane normal {n.tolist()} has zero length")
    n = n / norm
    p = np.asarray(point, dtype=float)
    dist = float(np.dot(p - np.asarray(plane_point, dtype=float), n))
    if abs(dist) < 1e-9:
        raise DegeneratePlane(f"point {p.tolist()} lies on the reflecting plane")
    return p - 2.0 * dist * n


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True UE poses (steps + 1, pose 0 at the prior time) and landmarks."""

    ue_states: tuple[UEState, ...]
    landmarks: tuple[Landmark, ...]
    bs_position: np.ndarray

    def landmark_positions(self, kind: LandmarkKind) -> np.ndarray:
        pts = [lm.position for lm in self.landmarks if lm.kind == kind]
        return np.vstack(pts) if pts else np.zeros((0, 3))

    def ue_matrix(self) -> np.ndarray:
        return np.vstack([s.to_vector() for s in self.ue_states])


def generate_scenario(config: ScenarioConfig) -> GroundTruth:
    """Noiseless constant-turn trajectory, VAs mirrored from the BS, SPs as given."""
    bs = np.asarray(config.bs_position, dtype=float)
    traj = config.trajectory
    transition = ConstantTurnTransition(traj.speed, traj.turn_rate, traj.step_duration)

    s = np.array([*traj.initial_position, traj.initial_heading, traj.initial_clock_bias], dtype=float)
    states = [UEState.from_vector(s)]
    for _ in range(traj.steps):
        s = transition(s)
        states.append(UEState.from_vector(s))

    landmarks = [Landmark(mirror_point(bs, pl.point, pl.normal), LandmarkKind.VA) for pl in config.va_planes]
    landmarks += [Landmark(np.asarray(p, dtype=float), LandmarkKind.SP) for p in config.sp_positions]
    return GroundTruth(tuple(states), tuple(landmarks), bs)


def simulate_measurements(truth: GroundTruth, k: int, sensor: SensorModel, rng: np.random.Generator) -> np.ndarray:
    """Measurement set at time k: detections of in-FoV landmarks (BS included) plus clutter, shuffled.

    Returns:
        (m, 5) array [toa, aoa_az, aoa_el, aod_az, aod_el].
    """
    if not 0 <= k < len(truth.ue_states):
        raise IndexError(f"time index {k} outside trajectory of {len(truth.ue_states)} poses")
    ue = truth.ue_states[k]
    std = np.asarray(sensor.noise_std, dtype=float)
    rows = []
    for lm in (Landmark(truth.bs_position, LandmarkKind.BS), *truth.landmarks):
        if not in_fov(lm, ue, sensor):
            continue
        if rng.random() >= sensor.detection_prob:
            continue
        z = measure(lm, ue, truth.bs_position).to_vector() + rng.normal(0.0, 1.0, 5) * std
        z = wrap_residual(z, CIRCULAR_MASK)
        z[AZIMUTHS], z[ELEVATIONS] = fold_direction(z[AZIMUTHS], z[ELEVATIONS])
        rows.append(z)

    n_clutter = int(rng.poisson(sensor.clutter_rate))
    for _ in range(n_clutter):
        rows.append(
            np.array([
                rng.uniform(0.0, sensor.toa_max),
                rng.uniform(-np.pi, np.pi),
                rng.uniform(-np.pi / 2.0, np.pi / 2.0),
                rng.uniform(-np.pi, np.pi),
                rng.uniform(-np.pi / 2.0, np.pi / 2.0),
            ])
        )
    if not rows:
        return np.zeros((0, 5))
    Z = np.vstack(rows)
    return Z[rng.permutation(Z.shape[0])]


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; one independent stream per seed."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class RunResult:
    """Per-step records of one Monte Carlo run."""

    run: int
    seed: int
    records: list[dict[str, float]] = field(default_factory=list)
    estimates: list[np.ndarray] = field(default_factory=list)
    stds: list[np.ndarray] = field(default_factory=list)
    truths: list[np.ndarray] = field(default_factory=list)
    error: str | None = None

    @property
    def diverged(self) -> bool:
        return self.error is not None


def run_single(scenario: ScenarioConfig, run: int, record_timing: bool = True) -> RunResult:
    """One filter run over the full trajectory with seed = scenario.seed + run."""
    seed = scenario.seed + run
    rng = make_rng(seed)
    truth = generate_scenario(scenario)
    sensor = scenario.sensor
    traj = scenario.trajectory
    fcfg = scenario.filter
    motion = constant_turn_motion(traj.speed, traj.turn_rate, traj.step_duration, scenario.motion_noise_std)
    ppp = PppIntensity(
        scenario.ppp.region_min,
        scenario.ppp.region_max,
        {LandmarkKind.VA: scenario.ppp.rate_va, LandmarkKind.SP: scenario.ppp.rate_sp},
    )
    truth_sets = {k: truth.landmark_positions(k) for k in MAP_KINDS}
    truth_matrix = truth.ue_matrix()

    state = initial_state(truth_matrix[0], scenario.prior_std, PmbMap(ppp))
    result = RunResult(run=run, seed=seed)
    with track_latency("mc.run") as t_run:
        for k in range(1, traj.steps + 1):
            Z = simulate_measurements(truth, k, sensor, rng)
            try:
                state = step(state, Z, sensor, motion, fcfg, truth.bs_position)
            except SlamError as e:
                result.error = f"step {k}: {type(e).__name__}: {e}"
                logger.warning(f"run {run} (seed {seed}) diverged at {result.error}")
                record_metric("filter.diverged", {"run": run, "seed": seed, "step": k}, outcome="diverged")
                break

            estimate = extract_map_estimate(state.map, fcfg.r_estimate)
            pos_err, heading_err, bias_err = ue_errors(state.ue.mean[None, :], truth_matrix[k][None, :])
            report = state.report
            timing = (report.step_ms, report.predict_ms, report.update_ms) if record_timing else (0.0, 0.0, 0.0)
            result.records.append({
                "step": k,
                "gospa_va": gospa(truth_sets[LandmarkKind.VA], estimate[LandmarkKind.VA], scenario.gospa).total,
                "gospa_sp": gospa(truth_sets[LandmarkKind.SP], estimate[LandmarkKind.SP], scenario.gospa).total,
                "pos_err": float(pos_err[0]),
                "heading_err": float(heading_err[0]),
                "bias_err": float(bias_err[0]),
                "iplf_iters": report.iplf_iterations,
                "step_ms": timing[0],
                "predict_ms": timing[1],
                "update_ms": timing[2],
            })
            result.estimates.append(np.array(state.ue.mean))
            result.stds.append(state.ue.std)
            result.truths.append(truth_matrix[k])

    record_metric(
        "mc.run",
        {"run": run, "seed": seed, "steps": len(result.records), "linearizer": fcfg.linearizer.value},
        outcome="diverged" if result.diverged else "ok",
        latency_ms=t_run.ms,
    )
    logger.debug(f"run {run} (seed {seed}): {len(result.records)} steps in {t_run.ms:.0f} ms")
    return result


def _run_star(args) -> RunResult:
    return run_single(*args)


def run_monte_carlo(
    scenario: ScenarioConfig,
    runs: int,
    workers: int = 1,
    record_timing: bool = True,
) -> list[RunResult]:
    """Independent runs 0..runs-1 with seeds scenario.seed + r, in run order.

    With workers > 1 the runs execute in separate processes; the results are
    identical to the serial ones apart from wall-clock columns.
    """
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    logger.info(
        f"Monte Carlo: {runs} runs, linearizer={scenario.filter.linearizer.value}, "
        f"gamma={scenario.filter.gamma}, seed={scenario.seed}, workers={workers}"
    )
    jobs = [(scenario, r, record_timing) for r in range(runs)]
    if workers > 1 and runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_star, jobs))
    else:
        results = [_run_star(job) for job in jobs]

    failed = [r.run for r in results if r.diverged]
    if failed:
        logger.warning(f"Monte Carlo: {len(failed)}/{runs} runs diverged: {failed}")
    logger.info(f"Monte Carlo finished: {runs - len(failed)}/{runs} runs completed")
    return results


def aggregate_runs(results: Sequence[RunResult], columns: Sequence[str] = STEP_COLUMNS[1:]) -> list[dict[str, float]]:
    """Per-step mean and std of every metric across the runs that reached the step."""
    by_step: dict[int, list[dict[str, float]]] = {}
    for res in results:
        for rec in res.records:
            by_step.setdefault(int(rec["step"]), []).append(rec)

    rows = []
    for k in sorted(by_step):
        recs = by_step[k]
        row: dict[str, float] = {"step": k, "runs": len(recs)}
        for col in columns:
            values = np.array([r[col] for r in recs], dtype=float)
            row[f"{col}_mean"] = float(values.mean())
            row[f"{col}_std"] = float(values.std())
        rows.append(row)
    return rows
