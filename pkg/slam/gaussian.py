"""Dense Gaussian-density primitives.

Factorization, PSD repair, marginalization, moment matching and KL divergence.
Every other module builds on these; dimensions here stay small (UE 5 plus a
handful of 3-dim landmarks), so everything is dense.
"""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from slam.errors import (
    DimensionMismatch,
    EmptyMixture,
    IndexOutOfRange,
    InvalidWeights,
    NotPositiveDefinite,
    SingularCovariance,
)

logger = logging.getLogger(__name__)

SYMMETRY_RTOL = 1e-9
PSD_RTOL = 1e-9
WEIGHT_ATOL = 1e-9
# Relative diagonal jitter used when a covariance has to be repaired before factorization.
REPAIR_JITTER = 1e-12
REPAIR_ATTEMPTS = 6


def _as_matrix(P) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {P.shape}")
    return P


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


@dataclass(frozen=True, eq=False)
class GaussianDensity:
    """Gaussian density N(mean, cov).

    The covariance is symmetrized on construction and must be positive
    semidefinite up to a relative tolerance of the trace. Arrays are stored
    read-only so instances can be shared freely.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).reshape(-1)
        cov = _as_matrix(self.cov)
        if cov.shape[0] != mean.shape[0]:
            raise DimensionMismatch(
                f"mean has dimension {mean.shape[0]} but cov is {cov.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise NotPositiveDefinite("density has non-finite mean or covariance")

        scale = max(float(np.max(np.abs(cov))), 1.0)
        if np.max(np.abs(cov - cov.T)) > SYMMETRY_RTOL * scale:
            raise NotPositiveDefinite("covariance is not symmetric")
        cov = _symmetrize(cov)

        trace = float(np.trace(cov))
        if cov.shape[0] and linalg.eigvalsh(cov)[0] < -PSD_RTOL * abs(trace):
            raise NotPositiveDefinite(f"covariance is indefinite (trace={trace:.3e})")

        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def __repr__(self) -> str:
        return f"GaussianDensity(dim={self.dim}, mean={np.array2string(self.mean, precision=4)})"


def ensure_psd(M, floor: float = 0.0) -> np.ndarray:
    """Clamp the eigenvalues of a symmetric matrix to at least `floor`.

    Args:
        M: Symmetric matrix.
        floor: Minimum eigenvalue of the result (>= 0).

    Returns:
        M itself (symmetrized copy) when it already satisfies the floor, otherwise
        the eigenvalue-clamped reconstruction.
    """
    M = _symmetrize(_as_matrix(M))
    if M.shape[0] == 0:
        return M.copy()
    w, V = linalg.eigh(M)
    if w[0] >= floor:
        return M.copy()
    w = np.maximum(w, floor)
    repaired = (V * w) @ V.T
    return _symmetrize(repaired)


def cholesky_factor(P) -> np.ndarray:
    """Lower-triangular G with G @ G.T == P.

    A covariance that fails factorization is PSD-repaired with a tiny relative
    eigenvalue floor and factorized again; the floor grows tenfold per failed
    attempt.

    Raises:
        NotPositiveDefinite: repair did not produce a factorizable matrix.
    """
    P = _symmetrize(_as_matrix(P))
    if not np.all(np.isfinite(P)):
        raise NotPositiveDefinite("covariance has non-finite entries")
    try:
        return linalg.cholesky(P, lower=True)
    except linalg.LinAlgError:
        pass

    n = P.shape[0]
    floor = REPAIR_JITTER * max(abs(float(np.trace(P))) / max(n, 1), 1e-12)
    for _ in range(REPAIR_ATTEMPTS):
        repaired = ensure_psd(P, floor=floor)
        repaired[np.diag_indices_from(repaired)] += floor
        try:
            G = linalg.cholesky(repaired, lower=True)
        except linalg.LinAlgError:
            floor *= 10.0
            continue
        logger.debug(f"cholesky_factor: repaired covariance of dim {n} with floor {floor:.2e}")
        return G
    raise NotPositiveDefinite(f"cannot factorize covariance of dim {n}")


def _index_array(dim: int, index_range) -> np.ndarray:
    if isinstance(index_range, slice):
        start = 0 if index_range.start is None else index_range.start
        stop = dim if index_range.stop is None else index_range.stop
        step = 1 if index_range.step is None else index_range.step
        if start < 0 or stop > dim or start >= stop or step <= 0:
            raise IndexOutOfRange(f"slice {index_range} outside dimension {dim}")
        return np.arange(start, stop, step)
    idx = np.asarray(list(index_range), dtype=int)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= dim:
        raise IndexOutOfRange(f"indices {idx.tolist()} outside dimension {dim}")
    return idx


def marginalize(joint: GaussianDensity, index_range) -> GaussianDensity:
    """Marginal of `joint` over the selected indices (slice, range or sequence)."""
    idx = _index_array(joint.dim, index_range)
    return GaussianDensity(joint.mean[idx], joint.cov[np.ix_(idx, idx)])


def moment_match(weights: Sequence[float], components: Sequence[GaussianDensity]) -> GaussianDensity:
    """Single Gaussian with the first two moments of a Gaussian mixture.

    Raises:
        EmptyMixture: no components.
        DimensionMismatch: components of different dimension or weight count mismatch.
        InvalidWeights: negative weights or weights not summing to 1.
    """
    if len(components) == 0:
        raise EmptyMixture("moment_match needs at least one component")
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != len(components):
        raise DimensionMismatch(f"{w.shape[0]} weights for {len(components)} components")
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > WEIGHT_ATOL:
        raise InvalidWeights(f"weights must be nonnegative and sum to 1, got sum={w.sum():.12f}")
    dim = components[0].dim
    if any(c.dim != dim for c in components):
        raise DimensionMismatch("mixture components have different dimensions")

    active = [(wi, c) for wi, c in zip(w, components) if wi > 0.0]
    mean = np.zeros(dim)
    for wi, c in active:
        mean = mean + wi * c.mean
    cov = np.zeros((dim, dim))
    for wi, c in active:
        d = c.mean - mean
        cov = cov + wi * (c.cov + np.outer(d, d))
    return GaussianDensity(mean, ensure_psd(cov))


def _cho(cov: np.ndarray):
    try:
        return linalg.cho_factor(cov, lower=True)
    except linalg.LinAlgError as e:
        raise SingularCovariance(f"covariance of dim {cov.shape[0]} is singular") from e


def _logdet(cho) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(cho[0]))))


def kl_divergence(a: GaussianDensity, b: GaussianDensity) -> float:
    """Closed-form KL(a || b) between two Gaussians.

    Raises:
        DimensionMismatch: different dimensions.
        SingularCovariance: a.cov or b.cov not positive definite.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"KL between dims {a.dim} and {b.dim}")
    cho_b = _cho(b.cov)
    cho_a = _cho(a.cov)
    diff = b.mean - a.mean
    trace_term = float(np.trace(linalg.cho_solve(cho_b, a.cov)))
    maha = float(diff @ linalg.cho_solve(cho_b, diff))
    kl = 0.5 * (trace_term + maha - a.dim + _logdet(cho_b) - _logdet(cho_a))
    return max(kl, 0.0)


def symmetric_kl(a: GaussianDensity, b: GaussianDensity) -> float:
    """KL(a || b) + KL(b || a)."""
    return kl_divergence(a, b) + kl_divergence(b, a)


def gaussian_log_likelihood(residual, cov) -> tuple[float, float]:
    """Log N(residual; 0, cov) and the squared Mahalanobis distance.

    Returns:
        Tuple of (log_likelihood, mahalanobis_squared)

    Raises:
        SingularCovariance: cov not positive definite.
    """
    r = np.atleast_1d(np.asarray(residual, dtype=float))
    cov = _symmetrize(_as_matrix(cov))
    cho = _cho(cov)
    maha = float(r @ linalg.cho_solve(cho, r))
    loglik = -0.5 * (maha + _logdet(cho) + r.shape[0] * np.log(2.0 * np.pi))
    return loglik, maha
