"""Poisson multi-Bernoulli map.

Undetected landmarks are a uniform Poisson point process per kind over a
box; detected ones are Bernoulli components carrying an existence
probability and a discrete mixture over landmark kinds (VA or SP), each kind
with its own 3D position density.

All map values are immutable; every operation returns new objects.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.special import logsumexp

from slam.errors import (
    DimensionMismatch,
    EmptyHypothesisSet,
    FunctionEvaluationFailure,
    InvalidWeights,
    NoPhysicalSolution,
    NotPositiveDefinite,
    SingularCovariance,
    SlamError,
)
from slam.gaussian import GaussianDensity, ensure_psd, gaussian_log_likelihood, moment_match
from slam.geometry import (
    CIRCULAR_MASK,
    LANDMARK_DIM,
    MAP_KINDS,
    MEASUREMENT_DIM,
    UE_DIM,
    LandmarkKind,
    SensorModel,
    detection_probability,
    invert_measurement_batch,
    stacked_measurement_fn,
)
from slam.linearization import ekf_linearize, slr
from slam.utils.angles import wrap_residual

logger = logging.getLogger(__name__)

KIND_WEIGHT_ATOL = 1e-9
# Eigenvalue floor for born position covariances [m^2].
BIRTH_COV_FLOOR = 1e-9


class PruneOptions(BaseModel):
    """Thresholds applied to the map at the end of every step."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    r_min: float = Field(default=1e-3, ge=0.0, le=1.0, description="Drop Bernoullis with existence below this")
    kind_w_min: float = Field(default=1e-3, ge=0.0, le=1.0, description="Drop kind components below this weight")
    merge_dist: float = Field(default=1.0, ge=0.0, description="Mahalanobis distance for merging duplicates")


@dataclass(frozen=True, eq=False)
class PppIntensity:
    """Uniform Poisson intensity of undetected landmarks over an axis-aligned box."""

    region_min: np.ndarray
    region_max: np.ndarray
    rate_per_kind: Mapping[LandmarkKind, float]

    def __post_init__(self):
        lo = np.asarray(self.region_min, dtype=float).reshape(-1)
        hi = np.asarray(self.region_max, dtype=float).reshape(-1)
        if lo.shape != (LANDMARK_DIM,) or hi.shape != (LANDMARK_DIM,):
            raise DimensionMismatch("PPP region corners must be 3-vectors")
        if np.any(hi <= lo):
            raise ValueError(f"PPP region is empty: min={lo.tolist()} max={hi.tolist()}")
        rates = {LandmarkKind(k): float(v) for k, v in self.rate_per_kind.items()}
        if any(v < 0 for v in rates.values()):
            raise ValueError(f"PPP rates must be >= 0, got {rates}")
        object.__setattr__(self, "region_min", lo)
        object.__setattr__(self, "region_max", hi)
        object.__setattr__(self, "rate_per_kind", rates)

    @property
    def volume(self) -> float:
        return float(np.prod(self.region_max - self.region_min))

    def contains(self, position) -> bool:
        p = np.asarray(position, dtype=float)
        return bool(np.all(p >= self.region_min) and np.all(p <= self.region_max))

    def intensity(self, kind: LandmarkKind, position) -> float:
        """lambda_kind(position): rate / volume inside the box, 0 outside."""
        if not self.contains(position):
            return 0.0
        return self.rate_per_kind.get(LandmarkKind(kind), 0.0) / self.volume


@dataclass(frozen=True, eq=False)
class BernoulliComponent:
    """A possibly existing landmark with a kind mixture over position densities."""

    id: int
    existence: float
    kind_weights: Mapping[LandmarkKind, float]
    kind_densities: Mapping[LandmarkKind, GaussianDensity]

    def __post_init__(self):
        r = float(self.existence)
        if not (-1e-12 <= r <= 1.0 + 1e-12):
            raise ValueError(f"existence must be in [0, 1], got {r}")
        weights = {LandmarkKind(k): float(w) for k, w in self.kind_weights.items()}
        densities = {LandmarkKind(k): d for k, d in self.kind_densities.items()}
        if not weights or set(weights) != set(densities):
            raise DimensionMismatch(f"kind weights {sorted(weights)} and densities {sorted(densities)} differ")
        if any(w < 0 for w in weights.values()) or abs(sum(weights.values()) - 1.0) > KIND_WEIGHT_ATOL:
            raise InvalidWeights(f"kind weights must sum to 1, got {weights}")
        if any(d.dim != LANDMARK_DIM for d in densities.values()):
            raise DimensionMismatch("landmark densities must be 3-dimensional")
        object.__setattr__(self, "existence", min(max(r, 0.0), 1.0))
        object.__setattr__(self, "kind_weights", weights)
        object.__setattr__(self, "kind_densities", densities)

    @property
    def map_kind(self) -> LandmarkKind:
        """Most probable kind; ties resolve in MAP_KINDS order."""
        order = [k for k in MAP_KINDS if k in self.kind_weights]
        return max(order, key=lambda k: (self.kind_weights[k], -order.index(k)))

    @property
    def map_density(self) -> GaussianDensity:
        return self.kind_densities[self.map_kind]

    def __repr__(self) -> str:
        weights = ", ".join(f"{k.value}={w:.3f}" for k, w in self.kind_weights.items())
        return f"BernoulliComponent(id={self.id}, r={self.existence:.4f}, {weights})"


@dataclass(frozen=True, eq=False)
class PmbMap:
    """PPP for undetected landmarks plus the detected Bernoullis."""

    ppp: PppIntensity
    bernoullis: tuple[BernoulliComponent, ...] = ()
    next_id: int = 0

    def __post_init__(self):
        bernoullis = tuple(self.bernoullis)
        ids = [b.id for b in bernoullis]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Bernoulli ids must be unique, got {ids}")
        next_id = max([self.next_id, *(i + 1 for i in ids)])
        object.__setattr__(self, "bernoullis", bernoullis)
        object.__setattr__(self, "next_id", next_id)

    def __len__(self) -> int:
        return len(self.bernoullis)

    def with_bernoullis(self, bernoullis: Sequence[BernoulliComponent], next_id: int | None = None) -> PmbMap:
        return PmbMap(self.ppp, tuple(bernoullis), self.next_id if next_id is None else next_id)


@dataclass(frozen=True)
class Association:
    """Target of one measurement: the BS, an existing Bernoulli, a birth, or clutter."""

    target: str
    bernoulli_id: int | None = None

    BS = "bs"
    EXISTING = "existing"
    NEW = "new"
    CLUTTER = "clutter"

    def __post_init__(self):
        if self.target not in (self.BS, self.EXISTING, self.NEW, self.CLUTTER):
            raise ValueError(f"unknown association target {self.target!r}")
        if (self.target in (self.EXISTING, self.NEW)) != (self.bernoulli_id is not None):
            raise ValueError(f"target {self.target!r} with bernoulli_id={self.bernoulli_id}")


@dataclass(frozen=True, eq=False)
class GlobalHypothesis:
    """One data association: a target per measurement and the detected Bernoulli ids."""

    weight: float
    assignment: tuple[Association, ...]
    detected: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        assignment = tuple(self.assignment)
        existing = [a.bernoulli_id for a in assignment if a.target == Association.EXISTING]
        if len(set(existing)) != len(existing):
            raise ValueError(f"a Bernoulli is assigned more than once: {existing}")
        if sum(a.target == Association.BS for a in assignment) > 1:
            raise ValueError("the BS is assigned more than once")
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "detected", frozenset(existing) if not self.detected else frozenset(self.detected))


def predict_map(pmb_map: PmbMap) -> PmbMap:
    """Static landmarks: the map prediction is the identity."""
    return pmb_map


def _normalize(weights: Mapping[LandmarkKind, float]) -> dict[LandmarkKind, float]:
    total = sum(weights.values())
    return {k: w / total for k, w in weights.items()}


def effective_detection_probability(b: BernoulliComponent, p_d) -> float:
    """Kind-averaged p_D of a Bernoulli; `p_d` is a float or a per-kind mapping."""
    if isinstance(p_d, Mapping):
        return float(sum(w * float(p_d.get(k, 0.0)) for k, w in b.kind_weights.items()))
    return float(p_d)


def misdetection_update(b: BernoulliComponent, p_d) -> tuple[BernoulliComponent, float]:
    """Missed-detection update of a Bernoulli.

    Args:
        b: Bernoulli before the update.
        p_d: Detection probability, a float or a per-kind mapping.

    Returns:
        Tuple of (updated Bernoulli, hypothesis weight factor 1 - r p_D).
    """
    p = effective_detection_probability(b, p_d)
    r = b.existence
    weight = 1.0 - r * p
    r_new = r * (1.0 - p) / weight if weight > 0.0 else 0.0

    kind_weights = b.kind_weights
    if isinstance(p_d, Mapping):
        missed = {k: w * (1.0 - float(p_d.get(k, 0.0))) for k, w in b.kind_weights.items()}
        if sum(missed.values()) > 0.0:
            kind_weights = _normalize(missed)
    return replace(b, existence=min(r_new, r), kind_weights=kind_weights), weight


# --- birth -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BirthCandidate:
    """Per-kind outcome of inverting one measurement.

    `log_likelihood` integrates the measurement density over the landmark
    position and sets the birth mass; `fit_log_likelihood` is the
    measurement-space density at the best-fitting position and sets the kind
    split.
    """

    kind: LandmarkKind
    density: GaussianDensity
    log_likelihood: float
    fit_log_likelihood: float


def _inverse_map(kind: LandmarkKind, bs_position):
    def fn(points: np.ndarray) -> np.ndarray:
        return invert_measurement_batch(kind, points[:, :5], points[:, 5:], bs_position)

    return fn


def _birth_density(kind: LandmarkKind, z: np.ndarray, ue_prior: GaussianDensity, R: np.ndarray, bs_position) -> GaussianDensity:
    """Born position density: inverse map moments over N([z; ue], blkdiag(R, P_ue)).

    Falls back to a first-order propagation when a cubature point has no
    physical inverse.
    """
    joint = GaussianDensity(np.concatenate([z, ue_prior.mean]), linalg.block_diag(R, ue_prior.cov))
    fn = _inverse_map(kind, bs_position)
    try:
        _, stats = slr(fn, joint)
        cov = stats.s_zz
    except (FunctionEvaluationFailure, NotPositiveDefinite):
        approx = ekf_linearize(fn, joint)
        cov = approx.H @ joint.cov @ approx.H.T
    mean = invert_measurement_batch(kind, z[None, :], ue_prior.mean[None, :], bs_position)[0]
    return GaussianDensity(mean, ensure_psd(cov, floor=BIRTH_COV_FLOOR))


def _birth_log_likelihood(
    kind: LandmarkKind, z: np.ndarray, ue_prior: GaussianDensity, position: np.ndarray, R: np.ndarray, bs_position
) -> tuple[float, float]:
    """Integrated and best-fit log-likelihoods of z under one landmark kind.

    The measurement model is linearized at (ue mean, position); UE uncertainty
    enters through S = R + H_ue P_ue H_ue^T.

    Returns:
        Tuple of (log of the integral of N(z; h(ue, m), S) over the landmark
        position m, log N(z; h(ue, m*), S) at the best-fitting m*). The
        integral carries a |J^T S^-1 J|^(-1/2) volume factor that grows with
        the landmark range; the best-fit term does not.
    """
    fn = stacked_measurement_fn(UE_DIM, (kind,), bs_position)
    anchor = GaussianDensity(
        np.concatenate([ue_prior.mean, position]),
        linalg.block_diag(ue_prior.cov, np.eye(LANDMARK_DIM)),
    )
    approx = ekf_linearize(fn, anchor, fn.circular_mask)
    H_ue, J = approx.H[:, :UE_DIM], approx.H[:, UE_DIM:]
    e = wrap_residual(z - (approx.H @ anchor.mean + approx.b), CIRCULAR_MASK)

    S = R + H_ue @ ue_prior.cov @ H_ue.T
    try:
        S_cho = linalg.cho_factor(S, lower=True)
        A = J.T @ linalg.cho_solve(S_cho, J)
        A_cho = linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError as e_:
        raise SingularCovariance("birth likelihood covariance is singular") from e_
    Si_e = linalg.cho_solve(S_cho, e)
    bvec = J.T @ Si_e
    quad = float(e @ Si_e - bvec @ linalg.cho_solve(A_cho, bvec))
    logdet_S = 2.0 * float(np.sum(np.log(np.diag(S_cho[0]))))
    logdet_A = 2.0 * float(np.sum(np.log(np.diag(A_cho[0]))))
    fit = -0.5 * quad - 0.5 * logdet_S - 0.5 * MEASUREMENT_DIM * np.log(2.0 * np.pi)
    integrated = fit - 0.5 * logdet_A + 0.5 * LANDMARK_DIM * np.log(2.0 * np.pi)
    return integrated, fit


def birth_candidates(z, ue_prior: GaussianDensity, sensor: SensorModel, bs_position) -> list[BirthCandidate]:
    """Per-kind birth densities and likelihoods; infeasible kinds are skipped."""
    z = np.asarray(z, dtype=float).reshape(-1)
    R = sensor.noise_cov
    out = []
    for kind in MAP_KINDS:
        try:
            density = _birth_density(kind, z, ue_prior, R, bs_position)
            loglik, fit = _birth_log_likelihood(kind, z, ue_prior, density.mean, R, bs_position)
        except (NoPhysicalSolution, FunctionEvaluationFailure) as e:
            logger.debug(f"birth: kind {kind.value} infeasible ({e})")
            continue
        except SlamError as e:
            logger.debug(f"birth: kind {kind.value} numerically degenerate ({type(e).__name__}: {e})")
            continue
        out.append(BirthCandidate(kind, density, loglik, fit))
    return out


def birth_bernoulli(
    z,
    ue_prior: GaussianDensity,
    ppp: PppIntensity,
    sensor: SensorModel,
    bs_position,
    bernoulli_id: int = 0,
) -> tuple[BernoulliComponent | None, float]:
    """Bernoulli born from a measurement not explained by the current map.

    Every single-bounce measurement has an exact VA and an exact SP
    explanation (the VA mirrored through the plane that bisects BS and SP),
    so kinds are split on the best-fit likelihood and both densities are
    kept; later detections from other UE poses settle the kind.

    Returns:
        Tuple of (Bernoulli, weight) with weight = c(z) + L_birth and existence
        L_birth / (c(z) + L_birth). The Bernoulli is None when no kind has
        birth mass; the weight is then the clutter density alone.
    """
    clutter = sensor.clutter_density
    log_mass: dict[LandmarkKind, float] = {}
    log_fit: dict[LandmarkKind, float] = {}
    densities: dict[LandmarkKind, GaussianDensity] = {}
    for cand in birth_candidates(z, ue_prior, sensor, bs_position):
        lam = ppp.intensity(cand.kind, cand.density.mean)
        p_d = detection_probability(cand.kind, cand.density.mean, ue_prior.mean[:3], sensor)
        if lam <= 0.0 or p_d <= 0.0:
            continue
        prior_term = np.log(lam) + np.log(p_d)
        log_mass[cand.kind] = prior_term + cand.log_likelihood
        log_fit[cand.kind] = prior_term + cand.fit_log_likelihood
        densities[cand.kind] = cand.density

    if not log_mass:
        return None, clutter
    birth = float(np.exp(logsumexp(list(log_mass.values()))))
    weight = clutter + birth
    if birth <= 0.0:
        return None, clutter
    existence = birth / weight
    log_norm = float(logsumexp(list(log_fit.values())))
    raw = {k: float(np.exp(v - log_norm)) for k, v in log_fit.items()}
    kept = {k: w for k, w in raw.items() if w > 0.0}
    kind_weights = _normalize(kept)
    densities = {k: densities[k] for k in kept}
    return BernoulliComponent(bernoulli_id, existence, kind_weights, densities), weight


# --- reduction ---------------------------------------------------------------

def _merge_components(parts: Sequence[tuple[float, BernoulliComponent]], bernoulli_id: int, existence: float) -> BernoulliComponent:
    """Combine weighted Bernoulli versions of one landmark into one component.

    Kind weights and densities are weighted by w * r * w_kind; with zero total
    existence the hypothesis weights alone are used.
    """
    kinds = [k for k in MAP_KINDS if any(k in b.kind_weights for _, b in parts)]
    mass = {k: 0.0 for k in kinds}
    for w, b in parts:
        for k, wk in b.kind_weights.items():
            mass[k] += w * b.existence * wk
    if sum(mass.values()) <= 0.0:
        for k in kinds:
            mass[k] = sum(w * b.kind_weights.get(k, 0.0) for w, b in parts)
        scale = [w for w, _ in parts]
    else:
        scale = [w * b.existence for w, b in parts]

    densities = {}
    for k in kinds:
        items = [
            (s * b.kind_weights[k], b.kind_densities[k])
            for s, (_, b) in zip(scale, parts)
            if k in b.kind_weights
        ]
        total = sum(x for x, _ in items)
        if total <= 0.0:
            items = [(1.0, d) for _, d in items]
            total = float(len(items))
        densities[k] = moment_match([x / total for x, _ in items], [d for _, d in items])

    kept = {k: m for k, m in mass.items() if m > 0.0} or {kinds[0]: 1.0}
    return BernoulliComponent(
        bernoulli_id,
        min(existence, 1.0),
        _normalize(kept),
        {k: densities[k] for k in kept},
    )


def pmbm_to_pmb(
    hypotheses: Sequence[tuple[GlobalHypothesis, Sequence[BernoulliComponent]]],
    ppp: PppIntensity,
    next_id: int = 0,
) -> PmbMap:
    """Marginalize the data associations into a single PMB.

    For every Bernoulli id: existence = sum_j w_j r_ji (missing from a
    hypothesis counts as r = 0), densities and kind weights are
    existence-weighted moment matches across hypotheses.

    Raises:
        EmptyHypothesisSet: no hypotheses.
    """
    if not hypotheses:
        raise EmptyHypothesisSet("pmbm_to_pmb needs at least one hypothesis")
    if len(hypotheses) == 1:
        return PmbMap(ppp, tuple(sorted(hypotheses[0][1], key=lambda b: b.id)), next_id)

    by_id: dict[int, list[tuple[float, BernoulliComponent]]] = {}
    for hyp, bernoullis in hypotheses:
        for b in bernoullis:
            by_id.setdefault(b.id, []).append((hyp.weight, b))

    merged = []
    for bid in sorted(by_id):
        parts = by_id[bid]
        existence = float(sum(w * b.existence for w, b in parts))
        merged.append(_merge_components(parts, bid, existence))
    return PmbMap(ppp, tuple(merged), next_id)


def _drop_weak_kinds(b: BernoulliComponent, kind_w_min: float) -> BernoulliComponent:
    kept = {k: w for k, w in b.kind_weights.items() if w >= kind_w_min}
    if len(kept) == len(b.kind_weights):
        return b
    if not kept:
        kept = {b.map_kind: 1.0}
    return replace(
        b,
        kind_weights=_normalize(kept),
        kind_densities={k: b.kind_densities[k] for k in kept},
    )


def _mahalanobis(a: GaussianDensity, b: GaussianDensity) -> float:
    try:
        _, maha = gaussian_log_likelihood(a.mean - b.mean, a.cov + b.cov)
    except SingularCovariance:
        return float("inf")
    return float(np.sqrt(maha))


def _union(a: BernoulliComponent, b: BernoulliComponent) -> BernoulliComponent:
    existence = 1.0 - (1.0 - a.existence) * (1.0 - b.existence)
    return _merge_components([(1.0, a), (1.0, b)], a.id, existence)


def prune(pmb_map: PmbMap, r_min: float, kind_w_min: float, merge_dist: float) -> PmbMap:
    """Remove unlikely Bernoullis and kinds, then merge same-kind duplicates.

    Merging keeps the id of the more probable component; existence becomes
    1 - (1 - r_a)(1 - r_b) and densities are moment matched.
    """
    survivors = [_drop_weak_kinds(b, kind_w_min) for b in pmb_map.bernoullis if b.existence >= r_min]
    dropped = len(pmb_map.bernoullis) - len(survivors)

    merges = 0
    if merge_dist > 0.0:
        changed = True
        while changed:
            changed = False
            survivors.sort(key=lambda b: (-b.existence, b.id))
            for i in range(len(survivors)):
                for j in range(i + 1, len(survivors)):
                    a, b = survivors[i], survivors[j]
                    if a.map_kind != b.map_kind:
                        continue
                    if _mahalanobis(a.map_density, b.map_density) < merge_dist:
                        survivors[i] = _union(a, b)
                        del survivors[j]
                        merges += 1
                        changed = True
                        break
                if changed:
                    break

    if dropped or merges:
        logger.debug(f"prune: dropped {dropped}, merged {merges}, kept {len(survivors)}")
    return pmb_map.with_bernoullis(sorted(survivors, key=lambda b: b.id))


def prune_with(pmb_map: PmbMap, options: PruneOptions) -> PmbMap:
    return prune(pmb_map, options.r_min, options.kind_w_min, options.merge_dist)
