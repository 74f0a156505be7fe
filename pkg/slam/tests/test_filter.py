"""
Filter cycle: UE prediction, association costs, per-hypothesis updates,
UE fusion and full steps.
"""
import numpy as np
import pytest
from scipy import linalg
from scipy.special import logsumexp

from slam.errors import NotPositiveDefinite
from slam.filter import (
    ConstantTurnTransition,
    FilterState,
    HypothesisUpdate,
    MotionModel,
    _fuse_ue,
    build_cost_matrix,
    constant_turn_motion,
    enumerate_hypotheses,
    predict_ue,
    step,
    update_hypothesis,
)
from slam.gaussian import GaussianDensity
from slam.geometry import Landmark, LandmarkKind, SensorModel, UEState, measure, stacked_measurement_fn
from slam.linearization import nonlinear_update
from slam.pmb import Association, BernoulliComponent, GlobalHypothesis, PmbMap, PppIntensity
from slam.schemas import FilterConfig

SP_TRUTH = np.array([30.0, 30.0, 2.0])
UE_TRUTH = UEState(np.array([20.0, 0.0, 0.0]), heading=np.pi / 2)


def make_ppp():
    return PppIntensity(
        np.array([-80.0, -80.0, -10.0]),
        np.array([80.0, 80.0, 30.0]),
        {LandmarkKind.VA: 4.0, LandmarkKind.SP: 4.0},
    )


def ue_prior(var=0.01):
    return GaussianDensity(UE_TRUTH.to_vector(), var * np.eye(5))


def sp_bernoulli(bid=0, r=1.0, var=0.25):
    return BernoulliComponent(
        bid, r, {LandmarkKind.SP: 1.0}, {LandmarkKind.SP: GaussianDensity(SP_TRUTH.copy(), var * np.eye(3))}
    )


def sp_measurement(bs_position):
    return measure(Landmark(SP_TRUTH, LandmarkKind.SP), UE_TRUTH, bs_position).to_vector()


def bs_measurement(bs_position):
    return measure(Landmark(np.asarray(bs_position), LandmarkKind.BS), UE_TRUTH, bs_position).to_vector()


def test_predict_identity_transition_adds_process_noise():
    prior = GaussianDensity(np.array([1.0, 2.0, 0.0, 0.3, 0.5]), np.diag([0.5, 0.4, 0.1, 0.01, 0.2]))
    Q = np.diag([0.1, 0.1, 0.01, 0.001, 0.05])
    pred = predict_ue(prior, MotionModel(lambda s: np.atleast_2d(s), Q))
    np.testing.assert_allclose(pred.mean, prior.mean, atol=1e-12)
    np.testing.assert_allclose(pred.cov, prior.cov + Q, atol=1e-12)


def test_predict_affine_transition():
    """Constant velocity along x: x' = x + 2, the rest unchanged."""
    F = np.eye(5)
    offset = np.array([2.0, 0.0, 0.0, 0.0, 0.0])
    prior = GaussianDensity(np.array([0.0, 0.0, 0.0, 0.1, 0.0]), np.diag([1.0, 1.0, 0.1, 0.01, 0.1]))
    pred = predict_ue(prior, MotionModel(lambda s: np.atleast_2d(s) @ F.T + offset, np.zeros((5, 5))))
    np.testing.assert_allclose(pred.mean, prior.mean + offset, atol=1e-12)
    np.testing.assert_allclose(pred.cov, prior.cov, atol=1e-12)


def test_constant_turn_prediction_follows_circle():
    motion = constant_turn_motion(2.0 * np.pi, np.pi / 10.0, 0.5, [0.0] * 5)
    prior = GaussianDensity(UE_TRUTH.to_vector(), 1e-10 * np.eye(5))
    pred = predict_ue(prior, motion)
    expected = ConstantTurnTransition(2.0 * np.pi, np.pi / 10.0, 0.5)(UE_TRUTH.to_vector())
    np.testing.assert_allclose(pred.mean, expected, atol=1e-6)
    # radius 20 around the origin is preserved
    assert np.hypot(pred.mean[0], pred.mean[1]) == pytest.approx(20.0, abs=1e-6)
    assert pred.mean[3] == pytest.approx(np.pi / 2 + np.pi / 20)


def test_constant_turn_rejects_bad_noise():
    with pytest.raises(NotPositiveDefinite):
        MotionModel(ConstantTurnTransition(1.0, 0.1, 0.5), np.diag([1.0, 1.0, 1.0, -1.0, 1.0]))


def test_cost_matrix_empty_map(bs_position):
    sensor = SensorModel()
    cm = build_cost_matrix(ue_prior(), PmbMap(make_ppp()), [bs_measurement(bs_position)], sensor, FilterConfig(), bs_position)
    assert cm.cost.shape == (1, 2)
    assert np.isfinite(cm.cost[0, 0])
    assert np.isfinite(cm.cost[0, 1])
    # the LOS measurement is explained far better by the BS than by a birth
    assert cm.cost[0, 0] < cm.cost[0, 1]


def test_cost_matrix_prefers_matching_bernoulli(bs_position):
    sensor = SensorModel()
    pmb_map = PmbMap(make_ppp(), (sp_bernoulli(r=0.9),))
    cm = build_cost_matrix(ue_prior(), pmb_map, [sp_measurement(bs_position)], sensor, FilterConfig(), bs_position)
    assert cm.cost.shape == (1, 3)
    assert cm.cost[0, 1] < cm.cost[0, 2]
    assert cm.association(0, 1) == Association(Association.EXISTING, 0)
    assert cm.association(0, 0) == Association(Association.BS)


def test_cost_matrix_without_detection_probability(bs_position):
    sensor = SensorModel(detection_prob=0.0)
    pmb_map = PmbMap(make_ppp(), (sp_bernoulli(),))
    Z = [bs_measurement(bs_position), sp_measurement(bs_position)]
    cm = build_cost_matrix(ue_prior(), pmb_map, Z, sensor, FilterConfig(), bs_position)
    assert np.isinf(cm.cost[:, :2]).all()
    assert cm.miss_log_weight == pytest.approx(0.0)
    # only clutter remains
    assert all(birth is None for birth, _ in cm.births)
    assert cm.cost[0, 2] == pytest.approx(-np.log(sensor.clutter_density))


def test_enumerate_hypotheses_weights_normalized(bs_position):
    sensor = SensorModel()
    pmb_map = PmbMap(make_ppp(), (sp_bernoulli(r=0.9),))
    Z = [bs_measurement(bs_position), sp_measurement(bs_position)]
    cm = build_cost_matrix(ue_prior(), pmb_map, Z, sensor, FilterConfig(), bs_position)
    ranked = enumerate_hypotheses(cm, 5)
    weights = [h.weight for h, _ in ranked]
    assert sum(weights) == pytest.approx(1.0)
    assert weights == sorted(weights, reverse=True)
    best = ranked[0][0]
    assert [a.target for a in best.assignment] == [Association.BS, Association.EXISTING]
    assert best.detected == frozenset({0})


def test_all_clutter_hypothesis_leaves_ue_unchanged(bs_position):
    sensor = SensorModel()
    prior = ue_prior()
    pmb_map = PmbMap(make_ppp())
    Z = [np.array([50.0, 0.3, 0.0, -1.0, 0.1])]
    cm = build_cost_matrix(prior, pmb_map, Z, sensor, FilterConfig(), bs_position)
    hyp = GlobalHypothesis(1.0, (Association(Association.CLUTTER),))
    upd = update_hypothesis(prior, pmb_map, hyp, cm, sensor, FilterConfig(), bs_position)
    np.testing.assert_array_equal(upd.ue.mean, prior.mean)
    np.testing.assert_array_equal(upd.ue.cov, prior.cov)
    assert upd.iterations == 0
    assert upd.bernoullis == ()


def test_line_of_sight_update_contracts_ue(bs_position):
    sensor = SensorModel()
    prior = ue_prior(var=0.25)
    pmb_map = PmbMap(make_ppp())
    cm = build_cost_matrix(prior, pmb_map, [bs_measurement(bs_position)], sensor, FilterConfig(), bs_position)
    hyp = GlobalHypothesis(1.0, (Association(Association.BS),))
    upd = update_hypothesis(prior, pmb_map, hyp, cm, sensor, FilterConfig(), bs_position)
    assert np.trace(upd.ue.cov) < np.trace(prior.cov)
    assert upd.iterations >= 1
    np.testing.assert_allclose(upd.ue.mean[:3], UE_TRUTH.position, atol=0.1)


def test_detected_landmark_update_matches_joint_update(bs_position):
    """With one associated SP the hypothesis update is the joint IPLF update of [UE; SP]."""
    sensor = SensorModel(detection_prob=1.0, clutter_rate=0.0)
    config = FilterConfig(gamma=1)
    prior = ue_prior(var=0.04)
    b = sp_bernoulli(var=1.0)
    pmb_map = PmbMap(make_ppp(), (b,))
    z = sp_measurement(bs_position) + np.array([0.05, 0.002, -0.003, 0.001, 0.0])
    cm = build_cost_matrix(prior, pmb_map, [z], sensor, config, bs_position)
    hyp = GlobalHypothesis(1.0, (Association(Association.EXISTING, 0),))
    upd = update_hypothesis(prior, pmb_map, hyp, cm, sensor, config, bs_position)

    fn = stacked_measurement_fn(5, [LandmarkKind.SP], bs_position)
    joint_prior = GaussianDensity(
        np.concatenate([prior.mean, b.map_density.mean]), linalg.block_diag(prior.cov, b.map_density.cov)
    )
    joint, iterations = nonlinear_update(fn, joint_prior, z, sensor.noise_cov, config.linearizer, config.iplf)

    assert upd.iterations == iterations
    np.testing.assert_allclose(upd.ue.mean, joint.mean[:5], atol=1e-10)
    np.testing.assert_allclose(upd.ue.cov, joint.cov[:5, :5], atol=1e-10)
    (updated,) = upd.bernoullis
    assert updated.existence == 1.0
    np.testing.assert_allclose(updated.map_density.mean, joint.mean[5:], atol=1e-10)
    np.testing.assert_allclose(updated.map_density.cov, joint.cov[5:, 5:], atol=1e-10)


def test_step_without_measurements_applies_misdetection(bs_position):
    """r = 0.8, p_D = 0.9: the missed Bernoulli drops to 0.08 / 0.28."""
    sensor = SensorModel(detection_prob=0.9)
    va = BernoulliComponent(
        0, 0.8, {LandmarkKind.VA: 1.0}, {LandmarkKind.VA: GaussianDensity(np.array([70.0, 0.0, 10.0]), np.eye(3))}
    )
    state = FilterState(ue_prior(), PmbMap(make_ppp(), (va,)))
    motion = constant_turn_motion(2.0 * np.pi, np.pi / 10.0, 0.5, [0.2, 0.2, 0.01, 0.0087, 0.2])
    new = step(state, np.zeros((0, 5)), sensor, motion, FilterConfig(), bs_position)

    assert new.step == 1
    assert new.report.measurements == 0
    assert new.report.hypotheses == 1
    assert new.report.iplf_iterations == 0.0
    (b,) = new.map.bernoullis
    assert b.existence == pytest.approx(0.08 / 0.28)


def test_step_is_deterministic(bs_position):
    sensor = SensorModel()
    state = FilterState(ue_prior(), PmbMap(make_ppp(), (sp_bernoulli(r=0.6),)))
    motion = constant_turn_motion(2.0 * np.pi, np.pi / 10.0, 0.5, [0.2, 0.2, 0.01, 0.0087, 0.2])
    moved = UEState.from_vector(ConstantTurnTransition(2.0 * np.pi, np.pi / 10.0, 0.5)(UE_TRUTH.to_vector()))
    Z = np.vstack([
        measure(Landmark(np.asarray(bs_position), LandmarkKind.BS), moved, bs_position).to_vector(),
        measure(Landmark(SP_TRUTH, LandmarkKind.SP), moved, bs_position).to_vector(),
    ])
    a = step(state, Z, sensor, motion, FilterConfig(gamma=4), bs_position)
    b = step(state, Z, sensor, motion, FilterConfig(gamma=4), bs_position)
    np.testing.assert_array_equal(a.ue.mean, b.ue.mean)
    np.testing.assert_array_equal(a.ue.cov, b.ue.cov)
    assert [x.id for x in a.map.bernoullis] == [x.id for x in b.map.bernoullis]
    assert [x.existence for x in a.map.bernoullis] == [x.existence for x in b.map.bernoullis]
    assert a.report.hypotheses >= 1
    assert a.map.next_id == state.map.next_id + 2


def test_fuse_ue_keeps_spread_and_wraps_heading():
    hyp = GlobalHypothesis(0.5, ())
    cov = 0.01 * np.eye(5)
    a = GaussianDensity(np.array([0.0, 0.0, 0.0, np.pi - 0.1, 0.0]), cov)
    b = GaussianDensity(np.array([2.0, 0.0, 0.0, -np.pi + 0.1, 0.0]), cov)
    updates = [HypothesisUpdate(hyp, 0.0, a, (), 1), HypothesisUpdate(hyp, 0.0, b, (), 1)]
    fused = _fuse_ue(updates, np.array([0.5, 0.5]))
    assert fused.mean[0] == pytest.approx(1.0)
    assert fused.cov[0, 0] == pytest.approx(0.01 + 1.0)
    assert abs(fused.mean[3]) == pytest.approx(np.pi, abs=1e-12)
    assert fused.cov[3, 3] == pytest.approx(0.01 + 0.01)


def test_crossing_associations_widen_the_fused_ue(bs_position):
    """Two close SPs, two measurements: fusing both assignments covers each one alone."""
    sensor = SensorModel()
    config = FilterConfig(gamma=2, linearizer="ek")
    prior = ue_prior(var=0.04)
    second = SP_TRUTH + np.array([0.0, 1.0, 0.0])
    b0 = sp_bernoulli(bid=0, var=1.0)
    b1 = BernoulliComponent(1, 1.0, {LandmarkKind.SP: 1.0}, {LandmarkKind.SP: GaussianDensity(second, np.eye(3))})
    pmb_map = PmbMap(make_ppp(), (b0, b1))
    Z = [sp_measurement(bs_position), measure(Landmark(second, LandmarkKind.SP), UE_TRUTH, bs_position).to_vector()]
    cm = build_cost_matrix(prior, pmb_map, Z, sensor, config, bs_position)
    assert cm.association(0, 1) == Association(Association.EXISTING, 0)
    assert cm.association(0, 2) == Association(Association.EXISTING, 1)

    straight = (Association(Association.EXISTING, 0), Association(Association.EXISTING, 1))
    crossed = (Association(Association.EXISTING, 1), Association(Association.EXISTING, 0))
    totals = np.array([cm.cost[0, 1] + cm.cost[1, 2], cm.cost[0, 2] + cm.cost[1, 1]])
    assert np.all(np.isfinite(totals))
    weights = np.exp(-totals - logsumexp(-totals))
    updates = [
        update_hypothesis(prior, pmb_map, GlobalHypothesis(w, a), cm, sensor, config, bs_position)
        for w, a in zip(weights, (straight, crossed))
    ]
    fused = _fuse_ue(updates, weights)
    for u in updates:
        assert np.linalg.eigvalsh(fused.cov - u.ue.cov).min() >= -1e-9


@pytest.mark.parametrize("linearizer, low, high", [("ek", 1.0, 1.0), ("ipl", 2.0, 10.0)])
def test_step_report_counts_linearizations(bs_position, linearizer, low, high):
    """EK linearizes once per update; IPL needs at least one more SLR to confirm convergence."""
    sensor = SensorModel()
    state = FilterState(ue_prior(), PmbMap(make_ppp(), (sp_bernoulli(r=0.9),)))
    motion = constant_turn_motion(2.0 * np.pi, np.pi / 10.0, 0.5, [0.2, 0.2, 0.01, 0.0087, 0.2])
    moved = UEState.from_vector(ConstantTurnTransition(2.0 * np.pi, np.pi / 10.0, 0.5)(UE_TRUTH.to_vector()))
    Z = np.vstack([
        measure(Landmark(np.asarray(bs_position), LandmarkKind.BS), moved, bs_position).to_vector(),
        measure(Landmark(SP_TRUTH, LandmarkKind.SP), moved, bs_position).to_vector(),
    ])
    new = step(state, Z, sensor, motion, FilterConfig(gamma=3, linearizer=linearizer), bs_position)
    assert low <= new.report.iplf_iterations <= high
