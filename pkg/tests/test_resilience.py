import math

import numpy as np
import pytest

from ringsweep.coordination import equilibrium_phases, kuramoto_rate
from ringsweep.resilience import (
    CAUSE_DISTANCE,
    CAUSE_INJECTED,
    CAUSE_STALE,
    FailureStatus,
    MODE_EXITING,
    MODE_FAILED,
    MODE_NOMINAL,
    MODE_REJOINING,
    ProtocolConfig,
    RobotProtocol,
    SpacingEstimate,
    SpacingEstimator,
    default_eps_th,
    detect_failure,
    exit_to_pout,
    feasibility_check,
    rejoin_complete,
    rejoin_target,
    spoof_virtual,
    wrap_angle,
)

CFG = ProtocolConfig(eps_th=0.38, distance_limit=21.0)


def test_wrap_angle():
    assert wrap_angle(0.3) == pytest.approx(0.3)
    assert wrap_angle(2 * math.pi + 0.1) == pytest.approx(0.1)
    assert wrap_angle(-0.1) == pytest.approx(-0.1)
    # principal interval is half-open: pi stays, -pi maps to pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_spacing_estimate_validation():
    SpacingEstimate(delta_star=-4 * math.pi / 5, confidence=0.0)
    with pytest.raises(ValueError):
        SpacingEstimate(delta_star=0.0, confidence=0.0)
    with pytest.raises(ValueError):
        SpacingEstimate(delta_star=2 * math.pi, confidence=0.0)


def test_capture_at_equilibrium_is_exact():
    # five robots, two cycles: neighbors of robot 0 sit at +-4pi/5
    thetas = equilibrium_phases(5, 2)
    est = SpacingEstimator([1, 4])
    out = est.estimate_spacing(
        thetas[0], {1: thetas[1], 4: thetas[4]}, residual=0.0, threshold=0.05
    )
    assert out[1].delta_star == pytest.approx(-4 * math.pi / 5, abs=1e-12)
    assert out[4].delta_star == pytest.approx(4 * math.pi / 5, abs=1e-12)
    # repeated exact captures must not drift
    for _ in range(50):
        est.estimate_spacing(
            thetas[0], {1: thetas[1], 4: thetas[4]}, residual=0.0, threshold=0.05
        )
    assert est.get(1).delta_star == pytest.approx(-4 * math.pi / 5, abs=1e-12)


def test_capture_gated_by_residual():
    est = SpacingEstimator([1])
    assert est.estimate_spacing(0.0, {1: 1.0}, residual=0.08, threshold=0.05) == {}
    assert est.get(1) is None
    with pytest.raises(ValueError):
        est.estimate_spacing(0.0, {1: 1.0}, residual=0.0, threshold=0.0)


def test_smoothing_converges_under_jitter():
    # phase readings jittered by up to 0.01 rad; after 100 captures the
    # smoothed estimate should sit within about a millirad of truth
    true = -4 * math.pi / 5
    errs = []
    for seed in range(15):
        rng = np.random.default_rng(seed)
        est = SpacingEstimator([1], alpha=0.05)
        for _ in range(100):
            noisy = true + rng.uniform(-0.01, 0.01)
            est.estimate_spacing(0.0, {1: -noisy}, residual=1e-4, threshold=0.05)
        errs.append(abs(est.get(1).delta_star - true))
    assert np.median(errs) < 1e-3
    assert max(errs) < 5e-3


def test_smoothing_recovers_from_bad_seed():
    est = SpacingEstimator([1], alpha=0.05)
    est.seed(1, 1.0)
    true = -4 * math.pi / 5
    for _ in range(300):
        est.estimate_spacing(0.0, {1: -true}, residual=0.0, threshold=0.05)
    assert est.get(1).delta_star == pytest.approx(true, abs=1e-6)


def test_detect_failure_causes():
    assert detect_failure(1.5, 0.0, CFG) == (True, CAUSE_STALE)
    assert detect_failure(0.2, 22.0, CFG) == (True, CAUSE_DISTANCE)
    assert detect_failure(0.2, 5.0, CFG) == (False, None)
    # silence is checked first when both symptoms are present
    assert detect_failure(1.5, 22.0, CFG) == (True, CAUSE_STALE)
    assert detect_failure(0.0, 0.0, CFG, injected=True) == (True, CAUSE_INJECTED)


def test_spoof_preserves_equilibrium_rate():
    # replacing a neighbor with its virtual stand-in keeps the coupling
    # contribution identical, so the phase rate stays exactly omega
    thetas = equilibrium_phases(5, 2)
    omega, gain = 0.03, 30.0
    est = SpacingEstimate(delta_star=wrap_angle(thetas[0] - thetas[1]), confidence=0.0)
    fake = spoof_virtual(thetas[0], est)
    rate = kuramoto_rate(thetas[0], [fake, thetas[4]], omega, gain)
    assert rate == pytest.approx(omega, abs=1e-12)
    with pytest.raises(ValueError):
        spoof_virtual(thetas[0], None)


def test_rejoin_target_and_guard():
    est = SpacingEstimate(delta_star=0.5, confidence=0.0)
    assert rejoin_target(1.0, est) == pytest.approx(1.5)
    assert rejoin_complete(1.5, 1.0, est, eps_th=0.1)
    assert rejoin_complete(1.625, 1.0, est, eps_th=0.125)   # boundary inclusive
    assert not rejoin_complete(1.75, 1.0, est, eps_th=0.1)
    # wrap-around: slot at +0.1, robot at 2pi - 0.05 is only 0.15 away
    est2 = SpacingEstimate(delta_star=0.1, confidence=0.0)
    assert rejoin_complete(2 * math.pi - 0.05, 0.0, est2, eps_th=0.2)
    with pytest.raises(ValueError):
        rejoin_target(1.0, None)


def test_feasibility_check():
    spacing = 4 * math.pi / 5
    assert feasibility_check(5, [])
    assert feasibility_check(5, [0.0, spacing])
    # more than floor(N/2) robots out
    assert not feasibility_check(5, [0.0, spacing, 2 * spacing])
    # phases half a cycle apart break the detection argument
    assert not feasibility_check(5, [0.0, math.pi])
    assert feasibility_check(7, [0.0, 0.5, 1.0, 1.5]) is False  # 4 > 3
    assert feasibility_check(7, [0.0, 0.5, 1.0])


def test_mode_transitions():
    st = FailureStatus()
    assert st.mode == MODE_NOMINAL
    st.advance(MODE_FAILED, 1.0, CAUSE_STALE)
    assert st.cause == CAUSE_STALE and st.since == 1.0
    st.advance(MODE_EXITING, 2.0)
    st.advance(MODE_REJOINING, 3.0)
    st.advance(MODE_NOMINAL, 4.0)
    assert st.cause is None
    with pytest.raises(ValueError):
        st.advance(MODE_EXITING, 5.0)
    with pytest.raises(ValueError):
        FailureStatus().advance(MODE_REJOINING, 0.0)


def test_exit_directive():
    d = exit_to_pout((40.0, 40.0, 0.0))
    assert d.kind == "exit"
    assert d.position == (40.0, 40.0, 0.0)


def _feed(proto, now, theta_i, polled, stale, dists, residual=0.0):
    return proto.observe(now, theta_i, polled, stale, dists, residual)


def test_protocol_detects_and_spoofs():
    thetas = equilibrium_phases(5, 2)
    proto = RobotProtocol(0, (1, 4), CFG)
    fresh = {1: 0.0, 4: 0.0}
    near = {1: 5.0, 4: 5.0}
    # a few settled ticks to learn the spacings
    for k in range(5):
        coup = _feed(proto, 0.1 * k, thetas[0], {1: thetas[1], 4: thetas[4]}, fresh, near)
    assert coup[1] == pytest.approx(thetas[1])   # live value passes through
    # neighbor 1 goes silent: staleness grows past tau_fail
    coup = _feed(proto, 2.0, thetas[0], {1: None, 4: thetas[4]}, {1: 1.6, 4: 0.0}, near)
    assert proto.failed_neighbors == {1: CAUSE_STALE}
    assert coup[1] == pytest.approx(thetas[0] - proto.estimator.get(1).delta_star)
    assert not proto.degraded
    # rate through the stand-in stays at omega
    rate = kuramoto_rate(thetas[0], list(coup.values()), 0.03, 30.0)
    assert rate == pytest.approx(0.03, abs=1e-9)


def test_protocol_reinstates_after_rejoin():
    thetas = equilibrium_phases(5, 2)
    proto = RobotProtocol(0, (1, 4), CFG)
    fresh = {1: 0.0, 4: 0.0}
    near = {1: 5.0, 4: 5.0}
    for k in range(5):
        _feed(proto, 0.1 * k, thetas[0], {1: thetas[1], 4: thetas[4]}, fresh, near)
    _feed(proto, 2.0, thetas[0], {1: None, 4: thetas[4]}, {1: 1.6, 4: 0.0}, near)
    assert 1 in proto.failed_neighbors
    # fresh again but phase far from the slot: still treated as failed
    _feed(proto, 2.1, thetas[0], {1: thetas[1] + 1.0, 4: thetas[4]}, fresh, near)
    assert 1 in proto.failed_neighbors
    # phase back within eps_th of the slot: reinstated, real value used
    _feed(proto, 2.2, thetas[0], {1: thetas[1] + 0.1, 4: thetas[4]}, fresh, near)
    assert 1 not in proto.failed_neighbors
    coup = _feed(proto, 2.3, thetas[0], {1: thetas[1], 4: thetas[4]}, fresh, near)
    assert coup[1] == pytest.approx(thetas[1])


def test_protocol_degraded_without_estimate():
    # failure before any settled capture: falls back to the last heard
    # phase and flags the degradation
    proto = RobotProtocol(0, (1, 4), CFG)
    coup = _feed(
        proto, 0.0, 0.0, {1: 0.7, 4: -0.7}, {1: 0.0, 4: 0.0}, {1: 5.0, 4: 5.0},
        residual=0.5,
    )
    assert proto.estimator.get(1) is None
    coup = _feed(
        proto, 2.0, 0.0, {1: None, 4: -0.7}, {1: 1.5, 4: 0.0}, {1: 5.0, 4: 5.0},
        residual=0.5,
    )
    assert proto.failed_neighbors == {1: CAUSE_STALE}
    assert coup[1] == pytest.approx(0.7)
    assert proto.degraded


def test_protocol_own_cycle_and_rejoin_flow():
    thetas = equilibrium_phases(5, 2)
    cfg = ProtocolConfig(eps_th=default_eps_th(5, 2), distance_limit=21.0)
    proto = RobotProtocol(2, (1, 3), cfg, p_out=(40.0, 40.0, 0.0))
    fresh = {1: 0.0, 3: 0.0}
    near = {1: 5.0, 3: 5.0}
    for k in range(5):
        _feed(proto, 0.1 * k, thetas[2], {1: thetas[1], 3: thetas[3]}, fresh, near)
    d = proto.fail(1.0)
    assert d.kind == "exit" and d.position == (40.0, 40.0, 0.0)
    proto.start_exit(1.1)
    proto.start_rejoin(10.0)
    # far from the slot: returns a steering target, mode unchanged
    tgt = proto.try_finish_rejoin(10.1, thetas[2] + 1.0, {1: thetas[1]})
    assert tgt == pytest.approx(thetas[1] + proto.estimator.get(1).delta_star)
    assert proto.status.mode == MODE_REJOINING
    # no live neighbor with an estimate: deferred
    assert proto.try_finish_rejoin(10.2, thetas[2] + 1.0, {}) is None
    assert proto.status.mode == MODE_REJOINING
    # within eps_th: rejoin closes, mode returns to nominal
    assert proto.try_finish_rejoin(10.3, thetas[2] + 0.01, {1: thetas[1]}) is None
    assert proto.status.mode == MODE_NOMINAL


def test_default_eps_th():
    assert default_eps_th(5, 2) == pytest.approx(0.15 * 4 * math.pi / 5)
    assert default_eps_th(7, 2) == pytest.approx(0.15 * 4 * math.pi / 7)


def test_stall_watch_optional():
    cfg = ProtocolConfig(
        eps_th=0.38, distance_limit=21.0, spoof_stalled=True, stall_time=0.5
    )
    thetas = equilibrium_phases(5, 2)
    proto = RobotProtocol(0, (1, 4), cfg)
    fresh = {1: 0.0, 4: 0.0}
    near = {1: 5.0, 4: 5.0}
    for k in range(5):
        _feed(proto, 0.1 * k, thetas[0], {1: thetas[1], 4: thetas[4]}, fresh, near)
    # neighbor 1 keeps transmitting the same frozen phase
    for k in range(10):
        coup = _feed(
            proto, 0.5 + 0.1 * k, thetas[0], {1: thetas[1], 4: thetas[4] + 0.001 * k},
            fresh, near,
        )
    assert proto.failed_neighbors.get(1) == CAUSE_STALE
    assert coup[1] == pytest.approx(thetas[0] - proto.estimator.get(1).delta_star)
