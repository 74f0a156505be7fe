"""
Metrics: GOSPA and its decomposition, map estimates and UE error summaries.
"""
import itertools

import numpy as np
import pytest

from slam.errors import LengthMismatch
from slam.gaussian import GaussianDensity
from slam.geometry import LandmarkKind
from slam.metrics import extract_map_estimate, gospa, ue_error_summary, ue_errors
from slam.pmb import BernoulliComponent, PmbMap, PppIntensity
from slam.schemas import GospaConfig

C, P, ALPHA = 20.0, 2.0, 2.0


def gospa_brute_force(X, Y, c=C, p=P):
    """Minimum over all partial matchings of sum min(d, c)^p + c^p / 2 per unmatched point."""
    if len(X) < len(Y):
        X, Y = Y, X
    n, m = len(X), len(Y)
    best = np.inf
    for perm in itertools.permutations(range(n), m):
        total = 0.0
        matched = 0
        for j, i in enumerate(perm):
            d = np.linalg.norm(X[i] - Y[j])
            if d < c:
                total += d**p
                matched += 1
        total += (c**p / 2.0) * (n + m - 2 * matched)
        best = min(best, total)
    if m == 0:
        best = (c**p / 2.0) * n
    return best ** (1.0 / p)


def test_gospa_identical_sets_is_zero():
    X = np.array([[1.0, 2.0, 3.0], [10.0, -4.0, 0.0]])
    result = gospa(X, X.copy())
    assert result.total == 0.0
    assert result.n_missed == 0 and result.n_false == 0


def test_gospa_empty_sets():
    assert gospa(np.zeros((0, 3)), np.zeros((0, 3))).total == 0.0


def test_gospa_four_missed():
    """Four undetected landmarks with c = 20, p = 2, alpha = 2 give sqrt(4 * 200)."""
    truth = np.array([[70.0, 0.0, 10.0], [-70.0, 0.0, 10.0], [0.0, 70.0, 10.0], [0.0, -70.0, 10.0]])
    result = gospa(truth, np.zeros((0, 3)), GospaConfig(cutoff=C, p=P, alpha=ALPHA))
    assert result.total == pytest.approx(28.2842712474619, abs=1e-12)
    assert result.n_missed == 4
    assert result.false == 0.0


def test_gospa_single_pair():
    result = gospa([[0.0, 0.0, 0.0]], [[3.0, 4.0, 0.0]])
    assert result.total == pytest.approx(5.0)
    assert result.localization == pytest.approx(5.0)


def test_gospa_far_pair_counts_as_missed_and_false():
    result = gospa([[0.0, 0.0, 0.0]], [[100.0, 0.0, 0.0]])
    assert result.n_missed == 1 and result.n_false == 1
    assert result.localization == 0.0
    assert result.total == pytest.approx(20.0)


def test_gospa_is_symmetric_and_decomposes(rng):
    X = rng.uniform(-30.0, 30.0, size=(4, 3))
    Y = rng.uniform(-30.0, 30.0, size=(6, 3))
    a, b = gospa(X, Y), gospa(Y, X)
    assert a.total == pytest.approx(b.total, rel=1e-12)
    assert (a.n_missed, a.n_false) == (b.n_false, b.n_missed)
    assert a.total**P == pytest.approx(a.localization**P + a.missed**P + a.false**P, rel=1e-12)


def test_gospa_matches_brute_force(rng):
    """200 random instances of up to 4 truth and 4 estimated points."""
    for _ in range(200):
        n, m = int(rng.integers(0, 5)), int(rng.integers(0, 5))
        X = rng.uniform(-25.0, 25.0, size=(n, 3))
        Y = rng.uniform(-25.0, 25.0, size=(m, 3))
        assert gospa(X, Y).total == pytest.approx(gospa_brute_force(X, Y), rel=1e-9, abs=1e-9)


def test_gospa_increases_with_cutoff():
    X = [[0.0, 0.0, 0.0], [50.0, 0.0, 0.0]]
    Y = [[1.0, 0.0, 0.0]]
    totals = [gospa(X, Y, GospaConfig(cutoff=c)).total for c in (5.0, 10.0, 20.0, 40.0)]
    assert totals == sorted(totals)


def make_map(*components):
    ppp = PppIntensity(np.full(3, -80.0), np.full(3, 80.0), {LandmarkKind.VA: 1.0, LandmarkKind.SP: 1.0})
    return PmbMap(ppp, components)


def component(bid, r, weights, mean):
    density = GaussianDensity(np.asarray(mean, dtype=float), np.eye(3))
    return BernoulliComponent(bid, r, weights, {k: density for k in weights})


def test_extract_map_estimate_thresholds_and_kinds():
    pmb_map = make_map(
        component(0, 0.9, {LandmarkKind.VA: 0.8, LandmarkKind.SP: 0.2}, [70.0, 0.0, 10.0]),
        component(1, 0.6, {LandmarkKind.SP: 1.0}, [30.0, 30.0, 2.0]),
        component(2, 0.3, {LandmarkKind.SP: 1.0}, [-30.0, 30.0, 2.0]),
    )
    est = extract_map_estimate(pmb_map, 0.5)
    np.testing.assert_allclose(est[LandmarkKind.VA], [[70.0, 0.0, 10.0]])
    np.testing.assert_allclose(est[LandmarkKind.SP], [[30.0, 30.0, 2.0]])


def test_extract_map_estimate_empty_and_invalid_threshold():
    est = extract_map_estimate(make_map())
    assert est[LandmarkKind.VA].shape == (0, 3)
    assert est[LandmarkKind.SP].shape == (0, 3)
    with pytest.raises(ValueError):
        extract_map_estimate(make_map(), 1.0)


def test_ue_errors_wrap_heading():
    est = np.array([[1.0, 1.0, 5.0, np.pi - 0.01, 0.3]])
    ref = np.array([[0.0, 0.0, 0.0, -np.pi + 0.01, 0.1]])
    pos, heading, bias = ue_errors(est, ref)
    assert pos[0] == pytest.approx(np.sqrt(2.0))
    assert heading[0] == pytest.approx(np.degrees(0.02))
    assert bias[0] == pytest.approx(0.2)
    with pytest.raises(LengthMismatch):
        ue_errors(est, np.zeros((2, 5)))


def test_ue_error_summary_constant_offset():
    truth = np.zeros((3, 5))
    est = truth.copy()
    est[:, 0] = 3.0
    est[:, 1] = 4.0
    est[:, 4] = 0.5
    stds = np.tile([0.3, 0.4, 0.1, np.radians(2.0), 0.2], (3, 1))
    summary = ue_error_summary([est, est], [truth, truth], [stds, stds])
    assert summary.pos_rmse == pytest.approx(5.0)
    assert summary.heading_rmse_deg == 0.0
    assert summary.bias_rmse == pytest.approx(0.5)
    assert summary.pos_std == pytest.approx(0.5)
    assert summary.heading_std_deg == pytest.approx(2.0)
    assert summary.bias_std == pytest.approx(0.2)
    # identical runs have no spread across runs
    assert summary.pos_std_empirical == pytest.approx(0.0)


def test_ue_error_summary_single_run_has_no_empirical_std():
    truth = np.zeros((2, 5))
    summary = ue_error_summary([truth], [truth])
    assert summary.pos_rmse == 0.0
    assert summary.pos_std is None
    assert summary.pos_std_empirical is None


def test_ue_error_summary_length_mismatch():
    with pytest.raises(LengthMismatch):
        ue_error_summary([np.zeros((2, 5))], [])
    with pytest.raises(LengthMismatch):
        ue_error_summary([np.zeros((2, 5))], [np.zeros((3, 5))])
    with pytest.raises(LengthMismatch):
        ue_error_summary([], [])
