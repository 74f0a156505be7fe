"""PMB SLAM filter cycle.

One step:
    predict the UE -> build the association cost matrix -> gamma best data
    associations (Murty) -> joint UE + landmark update per association
    (IPLF or EKF) -> fuse the UE posteriors -> marginalize the map to one PMB
    -> prune.

UE-landmark cross-correlations are dropped after every update; only the UE
marginal and the per-landmark marginals are carried between steps.
"""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from slam.assignment import murty_kbest
from slam.errors import DimensionMismatch, Infeasible, NoFeasibleHypothesis, NotPositiveDefinite, SlamError
from slam.gaussian import GaussianDensity, ensure_psd, gaussian_log_likelihood, marginalize, moment_match
from slam.geometry import (
    CIRCULAR_MASK,
    LANDMARK_DIM,
    MAP_KINDS,
    MEASUREMENT_DIM,
    UE_DIM,
    LandmarkKind,
    SensorModel,
    detection_probability,
    stacked_measurement_fn,
)
from slam.linearization import VectorFunction, linearize, slr, update_outcome
from slam.pmb import (
    Association,
    BernoulliComponent,
    GlobalHypothesis,
    PmbMap,
    birth_bernoulli,
    effective_detection_probability,
    misdetection_update,
    pmbm_to_pmb,
    predict_map,
    prune_with,
)
from slam.schemas import FilterConfig
from slam.utils.angles import wrap_angle, wrap_residual
from slam.utils.audit import track_latency

logger = logging.getLogger(__name__)

__all__ = [
    "ConstantTurnTransition",
    "CostMatrix",
    "FilterConfig",
    "FilterState",
    "HypothesisUpdate",
    "MotionModel",
    "StepReport",
    "build_cost_matrix",
    "constant_turn_motion",
    "enumerate_hypotheses",
    "initial_state",
    "predict_ue",
    "step",
    "update_hypothesis",
]

# [x, y, z, heading, bias]
UE_CIRCULAR_MASK = np.array([False, False, False, True, False])
HEADING = 3
# Lower bound on 1 - r p_D so surely-detected Bernoullis keep a finite cost.
MISS_FLOOR = 1e-12


def _wrap_ue(ue: GaussianDensity) -> GaussianDensity:
    heading = ue.mean[HEADING]
    wrapped = wrap_angle(heading)
    if wrapped == heading:
        return ue
    mean = ue.mean.copy()
    mean[HEADING] = wrapped
    return GaussianDensity(mean, ue.cov)


@dataclass(frozen=True, eq=False)
class ConstantTurnTransition:
    """Planar constant-turn-rate motion; z and clock bias stay constant."""

    speed: float
    turn_rate: float
    dt: float

    def __call__(self, states: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=float))
        x, y, z, h, b = s.T
        dh = self.turn_rate * self.dt
        if abs(self.turn_rate) > 1e-12:
            rho = self.speed / self.turn_rate
            nx = x + rho * (np.sin(h + dh) - np.sin(h))
            ny = y - rho * (np.cos(h + dh) - np.cos(h))
        else:
            nx = x + self.speed * self.dt * np.cos(h)
            ny = y + self.speed * self.dt * np.sin(h)
        out = np.column_stack([nx, ny, z, wrap_angle(h + dh), b])
        return out[0] if np.ndim(states) == 1 else out


@dataclass(frozen=True, eq=False)
class MotionModel:
    """s_k = v(s_{k-1}) + q, q ~ N(0, Q)."""

    transition: VectorFunction
    process_noise: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.process_noise, dtype=float))
        if Q.shape != (UE_DIM, UE_DIM):
            raise DimensionMismatch(f"process noise must be {UE_DIM}x{UE_DIM}, got {Q.shape}")
        if np.max(np.abs(Q - Q.T)) > 1e-12 or linalg.eigvalsh(Q)[0] < -1e-12 * max(abs(np.trace(Q)), 1.0):
            raise NotPositiveDefinite("process noise is not symmetric PSD")
        object.__setattr__(self, "process_noise", 0.5 * (Q + Q.T))


def constant_turn_motion(speed: float, turn_rate: float, dt: float, noise_std: Sequence[float]) -> MotionModel:
    """Constant-turn motion model with diagonal process noise."""
    Q = np.diag(np.square(np.asarray(noise_std, dtype=float)))
    return MotionModel(ConstantTurnTransition(speed, turn_rate, dt), Q)


@dataclass(frozen=True, eq=False)
class StepReport:
    """Bookkeeping of one filter step.

    `iplf_iterations` is the mean number of linearizations per association
    update: 1 for EK, the SLR evaluations including the one that confirmed
    convergence for IPL.
    """

    measurements: int
    hypotheses: int
    iplf_iterations: float
    predict_ms: float
    update_ms: float

    @property
    def step_ms(self) -> float:
        return self.predict_ms + self.update_ms


@dataclass(frozen=True, eq=False)
class FilterState:
    """UE marginal, PMB map and time index."""

    ue: GaussianDensity
    map: PmbMap
    step: int = 0
    report: StepReport | None = None

    def __post_init__(self):
        if self.ue.dim != UE_DIM:
            raise DimensionMismatch(f"UE density must be {UE_DIM}-dimensional, got {self.ue.dim}")
        object.__setattr__(self, "ue", _wrap_ue(self.ue))


def initial_state(ue_mean, ue_std, pmb_map: PmbMap) -> FilterState:
    return FilterState(
        GaussianDensity(np.asarray(ue_mean, dtype=float), np.diag(np.square(np.asarray(ue_std, dtype=float)))),
        pmb_map,
    )


def predict_ue(ue: GaussianDensity, motion: MotionModel) -> GaussianDensity:
    """Cubature prediction: mean and spread of v(s) plus Q."""
    _, stats = slr(motion.transition, ue, UE_CIRCULAR_MASK)
    mean = np.array(stats.z_pred, copy=True)
    mean[HEADING] = wrap_angle(mean[HEADING])
    return GaussianDensity(mean, ensure_psd(stats.s_zz + motion.process_noise))


# --- association costs -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Association costs plus what the per-hypothesis updates reuse.

    Columns: 0 is the BS, 1..n the map Bernoullis in map order, n+1+j the
    new-or-clutter column of measurement j (only entry j of that column is
    finite). Costs are relative to the missed-detection alternative;
    `miss_log_weight` restores the absolute hypothesis log-weight.
    """

    cost: np.ndarray
    measurements: np.ndarray
    bernoulli_ids: tuple[int, ...]
    kind_loglik: tuple[tuple[dict[LandmarkKind, float], ...], ...]
    detection_probs: tuple[dict[LandmarkKind, float], ...]
    births: tuple[tuple[BernoulliComponent | None, float], ...]
    miss_log_weight: float

    @property
    def n_measurements(self) -> int:
        return int(self.cost.shape[0])

    @property
    def n_bernoullis(self) -> int:
        return len(self.bernoulli_ids)

    def association(self, j: int, col: int) -> Association:
        if col == 0:
            return Association(Association.BS)
        if col <= self.n_bernoullis:
            return Association(Association.EXISTING, self.bernoulli_ids[col - 1])
        birth = self.births[j][0]
        if birth is None:
            return Association(Association.CLUTTER)
        return Association(Association.NEW, birth.id)


def _as_measurements(Z) -> np.ndarray:
    Z = np.asarray(Z if Z is not None else [], dtype=float)
    if Z.size == 0:
        return np.zeros((0, MEASUREMENT_DIM))
    Z = np.atleast_2d(Z)
    if Z.shape[1] != MEASUREMENT_DIM:
        raise DimensionMismatch(f"measurements must have {MEASUREMENT_DIM} components, got {Z.shape}")
    return Z


def _predicted_measurement(
    kind: LandmarkKind,
    ue: GaussianDensity,
    landmark: GaussianDensity | None,
    config: FilterConfig,
    R: np.ndarray,
    bs_position,
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted measurement and innovation covariance for one (UE, landmark) pair."""
    fn = stacked_measurement_fn(UE_DIM, (kind,), bs_position)
    if landmark is None:
        joint = ue
    else:
        joint = GaussianDensity(
            np.concatenate([ue.mean, landmark.mean]),
            linalg.block_diag(ue.cov, landmark.cov),
        )
    approx = linearize(fn, joint, config.linearizer, fn.circular_mask)
    z_pred = approx.H @ joint.mean + approx.b
    S = approx.H @ joint.cov @ approx.H.T + approx.omega + R
    return z_pred, 0.5 * (S + S.T)


def _pair_loglik(z: np.ndarray, z_pred: np.ndarray, S: np.ndarray) -> tuple[float, float]:
    return gaussian_log_likelihood(wrap_residual(z - z_pred, CIRCULAR_MASK), S)


def build_cost_matrix(
    ue: GaussianDensity,
    pmb_map: PmbMap,
    Z,
    sensor: SensorModel,
    config: FilterConfig,
    bs_position,
) -> CostMatrix:
    """Negative log association likelihoods of every measurement/target pair.

    Pairs whose squared Mahalanobis innovation exceeds the gate, or that have
    zero detection probability, are +inf.
    """
    Z = _as_measurements(Z)
    m = Z.shape[0]
    bernoullis = pmb_map.bernoullis
    n = len(bernoullis)
    R = sensor.noise_cov
    gate = config.gate_threshold
    cost = np.full((m, 1 + n + m), np.inf)
    ue_position = ue.mean[:3]

    # The BS always exists (r = 1).
    p_bs = detection_probability(LandmarkKind.BS, bs_position, ue_position, sensor)
    bs_miss = max(1.0 - p_bs, MISS_FLOOR)
    miss_log_weight = float(np.log(bs_miss))
    if p_bs > 0.0 and m:
        try:
            z_pred, S = _predicted_measurement(LandmarkKind.BS, ue, None, config, R, bs_position)
        except SlamError as e:
            logger.debug(f"cost: BS column unavailable ({type(e).__name__}: {e})")
        else:
            for j in range(m):
                loglik, maha = _pair_loglik(Z[j], z_pred, S)
                if maha <= gate:
                    cost[j, 0] = -(np.log(p_bs) + loglik) + np.log(bs_miss)

    kind_loglik: list[list[dict[LandmarkKind, float]]] = [[{} for _ in range(n)] for _ in range(m)]
    detection_probs = []
    for i, b in enumerate(bernoullis):
        p_d = {
            k: detection_probability(k, b.kind_densities[k].mean, ue_position, sensor) for k in b.kind_weights
        }
        detection_probs.append(p_d)
        miss = max(1.0 - b.existence * effective_detection_probability(b, p_d), MISS_FLOOR)
        miss_log_weight += float(np.log(miss))
        if b.existence <= 0.0 or not m:
            continue

        predictions = {}
        for k, w in b.kind_weights.items():
            if w <= 0.0 or p_d[k] <= 0.0:
                continue
            try:
                predictions[k] = _predicted_measurement(k, ue, b.kind_densities[k], config, R, bs_position)
            except SlamError as e:
                logger.debug(f"cost: Bernoulli {b.id} kind {k.value} skipped ({type(e).__name__}: {e})")

        for j in range(m):
            logs = {}
            for k, (z_pred, S) in predictions.items():
                loglik, maha = _pair_loglik(Z[j], z_pred, S)
                if maha <= gate:
                    logs[k] = loglik
            kind_loglik[j][i] = logs
            if logs:
                terms = [np.log(b.kind_weights[k]) + np.log(p_d[k]) + ll for k, ll in logs.items()]
                log_assoc = np.log(b.existence) + logsumexp(terms)
                cost[j, 1 + i] = -log_assoc + np.log(miss)

    births = []
    for j in range(m):
        birth, weight = birth_bernoulli(Z[j], ue, pmb_map.ppp, sensor, bs_position, bernoulli_id=pmb_map.next_id + j)
        births.append((birth, weight))
        if weight > 0.0:
            cost[j, 1 + n + j] = -np.log(weight)

    return CostMatrix(
        cost=cost,
        measurements=Z,
        bernoulli_ids=tuple(b.id for b in bernoullis),
        kind_loglik=tuple(tuple(row) for row in kind_loglik),
        detection_probs=tuple(detection_probs),
        births=tuple(births),
        miss_log_weight=miss_log_weight,
    )


def enumerate_hypotheses(cost_matrix: CostMatrix, gamma: int) -> list[tuple[GlobalHypothesis, float]]:
    """The gamma best global hypotheses with their (unnormalized) log-weights.

    Raises:
        NoFeasibleHypothesis: no assignment has finite cost.
    """
    try:
        ranked = murty_kbest(cost_matrix.cost, gamma)
    except Infeasible as e:
        raise NoFeasibleHypothesis(f"no feasible data association: {e}") from e

    log_weights = np.array([-total + cost_matrix.miss_log_weight for _, total in ranked])
    weights = np.exp(log_weights - logsumexp(log_weights))
    out = []
    for (cols, _), w, lw in zip(ranked, weights, log_weights):
        assignment = tuple(cost_matrix.association(j, c) for j, c in enumerate(cols))
        out.append((GlobalHypothesis(float(w), assignment), float(lw)))
    return out


# --- per-hypothesis update ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HypothesisUpdate:
    """Posterior of one data association."""

    hypothesis: GlobalHypothesis
    log_weight: float
    ue: GaussianDensity
    bernoullis: tuple[BernoulliComponent, ...]
    iterations: int
    linearizations: int = 0


def _single_landmark_update(
    ue: GaussianDensity,
    landmark: GaussianDensity,
    kind: LandmarkKind,
    z: np.ndarray,
    sensor: SensorModel,
    config: FilterConfig,
    bs_position,
) -> GaussianDensity:
    """Landmark marginal after updating [UE; landmark] with one measurement of `kind`."""
    fn = stacked_measurement_fn(UE_DIM, (kind,), bs_position)
    prior = GaussianDensity(
        np.concatenate([ue.mean, landmark.mean]),
        linalg.block_diag(ue.cov, landmark.cov),
    )
    outcome = update_outcome(fn, prior, z, sensor.noise_cov, config.linearizer, config.iplf, fn.circular_mask)
    return marginalize(outcome.posterior, slice(UE_DIM, UE_DIM + LANDMARK_DIM))


def _detected_kind_weights(b: BernoulliComponent, logs: dict[LandmarkKind, float], p_d: dict[LandmarkKind, float]) -> dict[LandmarkKind, float]:
    terms = {k: np.log(b.kind_weights[k]) + np.log(p_d[k]) + ll for k, ll in logs.items()}
    top = max(terms.values())
    raw = {k: float(np.exp(v - top)) for k, v in terms.items()}
    total = sum(raw.values())
    return {k: raw[k] / total for k in MAP_KINDS if k in raw}


def update_hypothesis(
    ue: GaussianDensity,
    pmb_map: PmbMap,
    hypothesis: GlobalHypothesis,
    cost_matrix: CostMatrix,
    sensor: SensorModel,
    config: FilterConfig,
    bs_position,
    log_weight: float = 0.0,
) -> HypothesisUpdate:
    """Joint update of the UE and every landmark the hypothesis associates.

    Detected Bernoullis are stacked with their MAP kind (after reweighting the
    kinds with the association likelihoods), missed ones get the
    misdetection update and new measurements add their birth Bernoulli.
    The other kinds of a detected Bernoulli are updated one by one against
    the UE prior, so a kind that loses the MAP slot keeps tracking its own
    explanation of the measurements.
    """
    Z = cost_matrix.measurements
    index = {bid: i for i, bid in enumerate(cost_matrix.bernoulli_ids)}
    bernoullis = pmb_map.bernoullis

    kinds: list[LandmarkKind] = []
    z_blocks: list[np.ndarray] = []
    landmark_priors: list[GaussianDensity] = []
    owners: list[int] = []
    owner_measurements: dict[int, np.ndarray] = {}
    detected_weights: dict[int, dict[LandmarkKind, float]] = {}
    born: list[BernoulliComponent] = []

    for j, assoc in enumerate(hypothesis.assignment):
        if assoc.target == Association.BS:
            kinds.append(LandmarkKind.BS)
            z_blocks.append(Z[j])
        elif assoc.target == Association.EXISTING:
            i = index[assoc.bernoulli_id]
            b = bernoullis[i]
            weights = _detected_kind_weights(b, cost_matrix.kind_loglik[j][i], cost_matrix.detection_probs[i])
            detected_weights[i] = weights
            kind = max(weights, key=lambda k: (weights[k], -MAP_KINDS.index(k)))
            kinds.append(kind)
            z_blocks.append(Z[j])
            landmark_priors.append(b.kind_densities[kind])
            owners.append(i)
            owner_measurements[i] = Z[j]
        elif assoc.target == Association.NEW:
            birth = cost_matrix.births[j][0]
            if birth is not None:
                born.append(birth)

    iterations = 0
    linearizations = 0
    posteriors: dict[int, tuple[LandmarkKind, GaussianDensity]] = {}
    ue_post = ue
    if kinds:
        prior = GaussianDensity(
            np.concatenate([ue.mean, *(d.mean for d in landmark_priors)]),
            linalg.block_diag(ue.cov, *(d.cov for d in landmark_priors)),
        )
        fn = stacked_measurement_fn(UE_DIM, kinds, bs_position)
        z = np.concatenate(z_blocks)
        R = linalg.block_diag(*([sensor.noise_cov] * len(kinds)))
        outcome = update_outcome(fn, prior, z, R, config.linearizer, config.iplf, fn.circular_mask)
        joint, iterations, linearizations = outcome.posterior, outcome.iterations, outcome.linearizations
        ue_post = _wrap_ue(marginalize(joint, slice(0, UE_DIM)))
        slots = [s for s in fn.slots if s is not None]
        for i, slot in zip(owners, slots):
            kind = fn.kinds[fn.slots.index(slot)]
            posteriors[i] = (kind, marginalize(joint, slice(slot, slot + LANDMARK_DIM)))

    updated = []
    for i, b in enumerate(bernoullis):
        if i in posteriors:
            kind, density = posteriors[i]
            densities = {}
            for k in detected_weights[i]:
                if k == kind:
                    densities[k] = density
                    continue
                try:
                    densities[k] = _single_landmark_update(
                        ue, b.kind_densities[k], k, owner_measurements[i], sensor, config, bs_position
                    )
                except SlamError as e:
                    logger.debug(f"update: Bernoulli {b.id} kind {k.value} kept its prior ({type(e).__name__}: {e})")
                    densities[k] = b.kind_densities[k]
            updated.append(replace(b, existence=1.0, kind_weights=detected_weights[i], kind_densities=densities))
        else:
            updated.append(misdetection_update(b, cost_matrix.detection_probs[i])[0])
    updated.extend(born)

    return HypothesisUpdate(hypothesis, log_weight, ue_post, tuple(updated), iterations, linearizations)


def _fuse_ue(updates: Sequence[HypothesisUpdate], weights: np.ndarray) -> GaussianDensity:
    """Moment match the UE posteriors; headings aligned to the strongest hypothesis."""
    ref = updates[int(np.argmax(weights))].ue.mean[HEADING]
    components = []
    for u in updates:
        mean = u.ue.mean.copy()
        mean[HEADING] = ref + wrap_angle(mean[HEADING] - ref)
        components.append(GaussianDensity(mean, u.ue.cov))
    return _wrap_ue(moment_match(weights, components))


def step(
    state: FilterState,
    Z,
    sensor: SensorModel,
    motion: MotionModel,
    config: FilterConfig,
    bs_position,
) -> FilterState:
    """One full prediction + update cycle.

    Raises:
        NoFeasibleHypothesis: every data association failed (filter divergence).
    """
    with track_latency("filter.predict") as t_predict:
        ue_pred = predict_ue(state.ue, motion)
        map_pred = predict_map(state.map)

    with track_latency("filter.update") as t_update:
        Z = _as_measurements(Z)
        cost_matrix = build_cost_matrix(ue_pred, map_pred, Z, sensor, config, bs_position)
        ranked = enumerate_hypotheses(cost_matrix, config.gamma)

        updates = []
        for hyp, log_weight in ranked:
            try:
                updates.append(
                    update_hypothesis(ue_pred, map_pred, hyp, cost_matrix, sensor, config, bs_position, log_weight)
                )
            except SlamError as e:
                logger.warning(f"step {state.step + 1}: dropping hypothesis ({type(e).__name__}: {e})")
        if not updates:
            raise NoFeasibleHypothesis(f"step {state.step + 1}: all {len(ranked)} hypotheses failed")

        log_weights = np.array([u.log_weight for u in updates])
        weights = np.exp(log_weights - logsumexp(log_weights))
        weights = weights / weights.sum()

        ue_post = _fuse_ue(updates, weights)
        merged = pmbm_to_pmb(
            [(replace(u.hypothesis, weight=float(w)), u.bernoullis) for u, w in zip(updates, weights)],
            map_pred.ppp,
            next_id=map_pred.next_id + Z.shape[0],
        )
        new_map = prune_with(merged, config.prune)

    counted = [u.linearizations for u in updates if u.linearizations > 0]
    report = StepReport(
        measurements=int(Z.shape[0]),
        hypotheses=len(updates),
        iplf_iterations=float(np.mean(counted)) if counted else 0.0,
        predict_ms=t_predict.ms,
        update_ms=t_update.ms,
    )
    logger.debug(
        f"step {state.step + 1}: {report.measurements} measurements, {report.hypotheses} hypotheses, "
        f"{len(new_map)} Bernoullis, iterations={report.iplf_iterations:.2f}"
    )
    return FilterState(ue_post, new_map, state.step + 1, report)
