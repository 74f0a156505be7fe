"""Exception hierarchy for the SLAM simulator.

Every failure raised by the library derives from SlamError so callers
(CLI, Monte Carlo harness) can catch one type and report the message.
"""
from __future__ import annotations


class SlamError(Exception):
    """Root of all library errors."""
    pass


# --- gaussian-core ---

class NotPositiveDefinite(SlamError):
    """Covariance could not be factorized, even after PSD repair."""
    pass


class IndexOutOfRange(SlamError):
    """Marginalization indices outside the density dimension."""
    pass


class EmptyMixture(SlamError):
    """Moment matching called with no components."""
    pass


class DimensionMismatch(SlamError):
    """Vectors/matrices with inconsistent shapes."""
    pass


class InvalidWeights(SlamError):
    """Mixture weights negative or not summing to one."""
    pass


class SingularCovariance(SlamError):
    """Covariance that must be inverted is singular."""
    pass


# --- geometry-model ---

class DegenerateGeometry(SlamError):
    """Zero-length direction vector in the measurement model."""
    pass


class NoPhysicalSolution(SlamError):
    """Measurement cannot be inverted to a landmark position."""
    pass


class UnsupportedKind(SlamError):
    """Operation not defined for the given landmark kind."""
    pass


class MisplacedBaseStation(SlamError):
    """BS landmark placed away from the known BS position."""
    pass


# --- linearization ---

class FunctionEvaluationFailure(SlamError):
    """Nonlinear function failed at a linearization point."""
    pass


class SingularInnovation(SlamError):
    """Innovation covariance is not invertible."""
    pass


# --- assignment ---

class Infeasible(SlamError):
    """No assignment with finite cost exists."""
    pass


# --- pmb-map / slam-filter ---

class EmptyHypothesisSet(SlamError):
    """PMBM to PMB reduction called without hypotheses."""
    pass


class NoFeasibleHypothesis(SlamError):
    """Every data-association hypothesis failed; the filter diverged."""
    pass


# --- sim-harness / metrics / cli ---

class DegeneratePlane(SlamError):
    """Reflecting plane with zero normal or containing the BS."""
    pass


class LengthMismatch(SlamError):
    """Estimate and truth sequences are not aligned."""
    pass


class MissingManifest(SlamError):
    """Run directory without manifest.json."""
    pass


class ScenarioConfigError(SlamError):
    """Scenario YAML missing, unparsable or failing validation."""
    pass
