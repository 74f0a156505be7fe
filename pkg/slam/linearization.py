"""Affine-plus-noise approximations of nonlinear measurement functions.

Three ways to obtain (H, b, Omega) such that h(s) ~ H s + b + e, e ~ N(0, Omega):

- ekf_linearize: first-order Taylor expansion at the prior mean (Omega = 0).
- slr: statistical linear regression over cubature points of a density.
- iplf: repeat slr with respect to successive posterior approximations,
  always updating the original prior, until the posterior stops moving.

Functions passed in here are batch functions: they map an (N, d_s) array of
states to an (N, d_z) array. They must be safe to call from several threads.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg

from slam.errors import (
    DimensionMismatch,
    FunctionEvaluationFailure,
    SingularCovariance,
    SingularInnovation,
    SlamError,
)
from slam.gaussian import GaussianDensity, cholesky_factor, ensure_psd, symmetric_kl
from slam.utils.angles import align_circular, wrap_residual

logger = logging.getLogger(__name__)

VectorFunction = Callable[[np.ndarray], np.ndarray]

FD_RELATIVE_STEP = 1e-6


class Linearizer(str, Enum):
    """Where the measurement function is linearized."""

    PRIOR = "ek"       # Taylor expansion at the prior mean (EKF)
    POSTERIOR = "ipl"  # iterated SLR w.r.t. the posterior (IPLF)


class IplfOptions(BaseModel):
    """Stopping rule of the IPLF loop."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    max_iterations: int = Field(default=10, ge=1)
    kl_threshold: float = Field(default=1e-4, gt=0.0)


@dataclass(frozen=True, eq=False)
class AffineApprox:
    """h(s) ~ H s + b + e with e ~ N(0, omega)."""

    H: np.ndarray
    b: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).reshape(-1)
        omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        if H.shape[0] != b.shape[0] or omega.shape != (b.shape[0], b.shape[0]):
            raise DimensionMismatch(f"H {H.shape}, b {b.shape}, omega {omega.shape} are inconsistent")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "omega", ensure_psd(omega))


@dataclass(frozen=True, eq=False)
class SlrStatistics:
    """Cubature moments: predicted measurement, its covariance and the state cross-covariance."""

    z_pred: np.ndarray
    s_zz: np.ndarray
    s_sz: np.ndarray


@dataclass(frozen=True, eq=False)
class IplfIterate:
    """One step of the IPLF loop."""

    iteration: int
    posterior: GaussianDensity
    approx: AffineApprox
    divergence: float | None
    converged: bool = False

    @property
    def linearizations(self) -> int:
        """SLR evaluations so far, the confirming one included."""
        return self.iteration + int(self.converged)


@dataclass(frozen=True, eq=False)
class UpdateOutcome:
    """Posterior of a nonlinear update with its iteration bookkeeping."""

    posterior: GaussianDensity
    iterations: int
    linearizations: int


def _evaluate(fn: VectorFunction, points: np.ndarray) -> np.ndarray:
    try:
        out = fn(points)
    except SlamError as e:
        raise FunctionEvaluationFailure(f"{type(e).__name__}: {e}") from e
    out = np.asarray(out, dtype=float)
    if out.ndim == 1:
        out = out.reshape(points.shape[0], -1)
    if out.shape[0] != points.shape[0]:
        raise DimensionMismatch(f"function returned {out.shape[0]} rows for {points.shape[0]} points")
    if not np.all(np.isfinite(out)):
        raise FunctionEvaluationFailure("function returned non-finite values")
    return out


def _mask_for(fn: VectorFunction, circular_mask) -> np.ndarray | None:
    if circular_mask is not None:
        return np.asarray(circular_mask, dtype=bool)
    mask = getattr(fn, "circular_mask", None)
    return None if mask is None else np.asarray(mask, dtype=bool)


def _cubature_deviations(G: np.ndarray) -> np.ndarray:
    d = G.shape[0]
    delta = np.sqrt(d) * np.hstack([np.eye(d), -np.eye(d)])
    return (G @ delta).T


def cubature_points(density: GaussianDensity) -> tuple[np.ndarray, np.ndarray]:
    """Third-degree spherical-radial cubature points.

    Returns:
        Tuple of (points, weights): points (2d, d) as m + G delta_c with
        delta_c = sqrt(d) [I, -I] columns, weights all 1/(2d).
    """
    X = _cubature_deviations(cholesky_factor(density.cov))
    n = X.shape[0]
    return density.mean + X, np.full(n, 1.0 / n)


def slr(fn: VectorFunction, density: GaussianDensity, circular_mask=None) -> tuple[AffineApprox, SlrStatistics]:
    """Statistical linear regression of `fn` with respect to `density`.

    Circular output components are unwrapped around a common reference before
    averaging, so points straddling the +-pi cut do not corrupt the moments.
    """
    mask = _mask_for(fn, circular_mask)
    G = cholesky_factor(density.cov)
    X = _cubature_deviations(G)
    Z = _evaluate(fn, density.mean + X)
    n = Z.shape[0]

    if mask is not None:
        Z = align_circular(Z, Z[0], mask)
        Z = align_circular(Z, Z.mean(axis=0), mask)
    z_pred = Z.mean(axis=0)
    dZ = Z - z_pred
    s_zz = ensure_psd(dZ.T @ dZ / n)
    s_sz = X.T @ dZ / n

    H = linalg.cho_solve((G, True), s_sz).T
    b = z_pred - H @ density.mean
    omega = s_zz - H @ density.cov @ H.T
    return AffineApprox(H, b, omega), SlrStatistics(z_pred, s_zz, s_sz)


def ekf_linearize(fn: VectorFunction, density: GaussianDensity, circular_mask=None) -> AffineApprox:
    """First-order Taylor linearization at the mean (central differences), Omega = 0."""
    mask = _mask_for(fn, circular_mask)
    m = density.mean
    d = m.shape[0]
    steps = FD_RELATIVE_STEP * np.maximum(1.0, np.abs(m))
    E = np.diag(steps)
    points = np.vstack([m[None, :], m + E, m - E])
    Z = _evaluate(fn, points)
    f0, fp, fm = Z[0], Z[1 : d + 1], Z[d + 1 :]
    diff = wrap_residual(fp - fm, mask)
    H = (diff / (2.0 * steps)[:, None]).T
    b = f0 - H @ m
    return AffineApprox(H, b, np.zeros((f0.shape[0], f0.shape[0])))


def kf_update(prior: GaussianDensity, approx: AffineApprox, z, R, circular_mask=None) -> GaussianDensity:
    """Kalman update of `prior` with the affine measurement model `approx`.

    Raises:
        DimensionMismatch: inconsistent shapes.
        SingularInnovation: H P H^T + Omega + R not positive definite.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float)).reshape(-1)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    H = approx.H
    if H.shape != (z.shape[0], prior.dim) or R.shape != (z.shape[0], z.shape[0]):
        raise DimensionMismatch(
            f"H {H.shape}, z {z.shape}, R {R.shape} do not fit a prior of dim {prior.dim}"
        )
    P = prior.cov
    PHt = P @ H.T
    S = H @ PHt + approx.omega + R
    S = 0.5 * (S + S.T)
    try:
        cho = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError as e:
        raise SingularInnovation(f"innovation covariance of dim {S.shape[0]} is singular") from e
    K = linalg.cho_solve(cho, PHt.T).T

    residual = wrap_residual(z - H @ prior.mean - approx.b, circular_mask)
    mean = prior.mean + K @ residual
    cov = P - K @ PHt.T
    return GaussianDensity(mean, ensure_psd(0.5 * (cov + cov.T)))


def _successive_divergence(a: GaussianDensity, b: GaussianDensity) -> float:
    try:
        return symmetric_kl(a, b)
    except SingularCovariance:
        return float(np.linalg.norm(a.mean - b.mean) + np.linalg.norm(a.cov - b.cov))


def iterate_posterior_linearization(
    fn: VectorFunction,
    prior: GaussianDensity,
    z,
    R,
    opts: IplfOptions | None = None,
    circular_mask=None,
) -> Iterator[IplfIterate]:
    """Yield the IPLF iterates, starting with the SLR at the prior.

    The iteration counter only advances when a relinearization moves the
    posterior by more than the KL threshold; the confirming relinearization is
    yielded with `converged=True` and the same counter.
    """
    opts = opts or IplfOptions()
    mask = _mask_for(fn, circular_mask)

    approx, _ = slr(fn, prior, mask)
    posterior = kf_update(prior, approx, z, R, mask)
    count = 1
    yield IplfIterate(count, posterior, approx, None)

    while count < opts.max_iterations:
        approx, _ = slr(fn, posterior, mask)
        candidate = kf_update(prior, approx, z, R, mask)
        divergence = _successive_divergence(candidate, posterior)
        posterior = candidate
        if divergence < opts.kl_threshold:
            yield IplfIterate(count, posterior, approx, divergence, converged=True)
            return
        count += 1
        yield IplfIterate(count, posterior, approx, divergence)
    logger.debug(f"iplf: no convergence within {opts.max_iterations} iterations")


def iplf(
    fn: VectorFunction,
    prior: GaussianDensity,
    z,
    R,
    opts: IplfOptions | None = None,
    circular_mask=None,
) -> tuple[GaussianDensity, int]:
    """Iterated posterior linearization update.

    Returns:
        Tuple of (posterior, iterations). Non-convergence within the cap
        returns the last iterate with iterations == max_iterations.
    """
    last = None
    for last in iterate_posterior_linearization(fn, prior, z, R, opts, circular_mask):
        pass
    return last.posterior, last.iteration


def update_outcome(
    fn: VectorFunction,
    prior: GaussianDensity,
    z,
    R,
    linearizer: Linearizer,
    opts: IplfOptions | None = None,
    circular_mask=None,
) -> UpdateOutcome:
    """Measurement update with the configured linearizer.

    EK does one Taylor linearization. IPL reports both the posterior-moving
    iterations and the SLR evaluations, the confirming one included.
    """
    if Linearizer(linearizer) == Linearizer.PRIOR:
        mask = _mask_for(fn, circular_mask)
        approx = ekf_linearize(fn, prior, mask)
        return UpdateOutcome(kf_update(prior, approx, z, R, mask), 1, 1)
    last = None
    for last in iterate_posterior_linearization(fn, prior, z, R, opts, circular_mask):
        pass
    return UpdateOutcome(last.posterior, last.iteration, last.linearizations)


def nonlinear_update(
    fn: VectorFunction,
    prior: GaussianDensity,
    z,
    R,
    linearizer: Linearizer,
    opts: IplfOptions | None = None,
    circular_mask=None,
) -> tuple[GaussianDensity, int]:
    """Measurement update with the configured linearizer; EK always reports 1 iteration."""
    outcome = update_outcome(fn, prior, z, R, linearizer, opts, circular_mask)
    return outcome.posterior, outcome.iterations


def linearize(fn: VectorFunction, density: GaussianDensity, linearizer: Linearizer, circular_mask=None) -> AffineApprox:
    """Single linearization w.r.t. `density`: Taylor at the mean (EK) or SLR (IPL)."""
    if Linearizer(linearizer) == Linearizer.PRIOR:
        return ekf_linearize(fn, density, circular_mask)
    return slr(fn, density, circular_mask)[0]
