"""Tests for the scenario engine: targets, coverage, safety, runs, replay."""

import math

import numpy as np
import pytest

from ringsweep.config import build_config
from ringsweep.coordination import EquilibriumSpec, equilibrium_phases
from ringsweep.sim import (
    CoverageGrid,
    GuaranteeRefusal,
    Simulation,
    SimulationError,
    TargetField,
    baseline_openloop_rate,
    check_detection,
    run,
    spacing_deviation,
    update_coverage,
    update_targets,
    z_safety,
)


def scenario(**extra):
    # five robots on the 20 m mission square; adjacent distances on this
    # curve stay inside the failure watchdog envelope at every rotation
    data = {
        "name": "unit",
        "duration": 2.0,
        "seed": 5,
        "curve": {"A": 20.0, "B": 20.0, "C": 2.0, "a": 3, "b": 2, "c": 7,
                  "phi": 1.5707963267948966},
        "swarm": {"n": 5, "omega": 0.03, "coupling": 30.0, "dt": 0.01},
        "mission": {"eta": 1.05},
        "options": {"tracker_mode": "ideal", "comm_period": 1,
                    "measurement_noise": 0.0, "log_period": 10},
    }
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(data.get(key), dict):
            data[key].update(val)
        else:
            data[key] = val
    return build_config(data)


# --- targets ---------------------------------------------------------------


def test_target_field_is_seeded_and_confined():
    a = TargetField(50, 1.0, (20.0, 20.0), np.random.default_rng(3))
    b = TargetField(50, 1.0, (20.0, 20.0), np.random.default_rng(3))
    assert np.array_equal(a.positions, b.positions)
    for _ in range(500):
        update_targets(a, 0.5)
    assert (np.abs(a.positions) <= 20.0).all()


def test_static_targets_do_not_move():
    f = TargetField(10, 0.0, (20.0, 20.0), np.random.default_rng(0))
    before = f.positions.copy()
    update_targets(f, 10.0)
    assert np.array_equal(f.positions, before)


def test_target_steps_at_configured_speed():
    f = TargetField(1, 2.0, (20.0, 20.0), np.random.default_rng(1))
    f.positions[0] = (0.0, 0.0)
    f.waypoints[0] = (10.0, 0.0)
    update_targets(f, 0.5)
    assert f.positions[0] == pytest.approx((1.0, 0.0))


def test_detection_marks_only_active_and_keeps_first_time():
    f = TargetField(2, 0.0, (20.0, 20.0), np.random.default_rng(0))
    f.positions[0] = (0.0, 0.0)
    f.positions[1] = (15.0, 15.0)
    robots = np.array([[0.5, 0.0], [15.0, 15.5]])
    check_detection(f, robots, 1.0, [True, False], now=3.0)
    assert f.detected_at[0] == 3.0
    assert math.isnan(f.detected_at[1])
    # later pass with the second robot active must not rewrite the first time
    check_detection(f, robots, 1.0, [True, True], now=4.0)
    assert f.detected_at[0] == 3.0
    assert f.detected_at[1] == 4.0


def test_detection_radius_is_planar():
    f = TargetField(1, 0.0, (20.0, 20.0), np.random.default_rng(0))
    f.positions[0] = (0.0, 0.0)
    check_detection(f, np.array([[0.0, 1.001]]), 1.0, [True], now=1.0)
    assert math.isnan(f.detected_at[0])
    check_detection(f, np.array([[0.0, 0.999]]), 1.0, [True], now=2.0)
    assert f.detected_at[0] == 2.0


# --- coverage ---------------------------------------------------------------


def test_coverage_grid_monotone_and_complete():
    grid = CoverageGrid((10.0, 10.0), 1.0)
    assert grid.fraction == 0.0
    update_coverage(grid, np.array([[0.0, 0.0]]), 3.0, [True], now=0.0)
    first = grid.fraction
    assert 0.0 < first < 1.0
    update_coverage(grid, np.array([[8.0, 8.0]]), 3.0, [True], now=1.0)
    assert grid.fraction >= first
    update_coverage(grid, np.array([[0.0, 0.0]]), 100.0, [True], now=2.0)
    assert grid.fraction == 1.0
    # first-covered stamps survive later passes
    assert np.nanmin(grid.first_covered) == 0.0


def test_coverage_ignores_inactive():
    grid = CoverageGrid((10.0, 10.0), 1.0)
    update_coverage(grid, np.array([[0.0, 0.0]]), 5.0, [False], now=0.0)
    assert grid.fraction == 0.0


# --- z safety ---------------------------------------------------------------


def test_z_safety_lifts_lower_id():
    pos = np.array([[0.0, 0.0, 1.0], [0.4, 0.0, 1.0], [10.0, 0.0, 1.0]])
    adj = z_safety(pos, threshold=1.0, offset=2.0)
    assert adj[0] == 2.0 and adj[1] == 0.0 and adj[2] == 0.0


def test_z_safety_ignores_vertical_distance():
    pos = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 50.0]])
    adj = z_safety(pos, threshold=1.0, offset=2.0)
    assert adj[0] == 2.0


def test_z_safety_threshold_must_be_positive():
    with pytest.raises(ValueError, match="threshold"):
        z_safety(np.zeros((2, 3)), threshold=0.0, offset=1.0)


# --- spacing metric ---------------------------------------------------------


def test_spacing_deviation_zero_at_equilibrium():
    eq = EquilibriumSpec(n_robots=5, p=2)
    th = equilibrium_phases(eq.n_robots, eq.p)
    assert spacing_deviation(th, eq) == pytest.approx(0.0)


def test_spacing_deviation_spans_gaps():
    eq = EquilibriumSpec(n_robots=5, p=2)
    th = equilibrium_phases(eq.n_robots, eq.p)
    live = np.array([True, True, False, True, True])
    # a dead slot is no deviation as long as the survivors hold their slots
    assert spacing_deviation(th, eq, live) == pytest.approx(0.0)
    th[3] += 0.2
    assert spacing_deviation(th, eq, live) == pytest.approx(0.2)


def test_openloop_baseline_rate_is_omega():
    sc = scenario()
    assert baseline_openloop_rate(sc.swarm) == sc.swarm.omega


# --- guarantees gate --------------------------------------------------------


def test_run_refuses_unsafe_mission():
    sc = scenario(mission={"r_s": 0.5})
    with pytest.raises(GuaranteeRefusal, match="guarantees violated"):
        run(sc)


def test_override_lets_unsafe_mission_run():
    sc = scenario(mission={"r_s": 0.5}, duration=0.5,
                  override_guarantees=True)
    trace = run(sc)
    assert trace.summary["coverage_final_pct"] < 100.0


# --- full runs --------------------------------------------------------------


def test_equilibrium_is_a_fixed_point():
    trace = run(scenario(duration=5.0))
    assert trace.summary["final_spacing_deviation"] < 1e-9
    assert trace.summary["final_order_residual"] < 1e-9
    assert (trace.cos_edge < 0.0).all()
    assert trace.summary["max_tracking_error"] < 1e-9


def test_perturbed_phases_reconverge():
    trace = run(scenario(
        duration=60.0, options={"initial_perturbation": 0.1},
    ))
    assert trace.summary["final_spacing_deviation"] < 1e-6


def test_trace_shapes_and_cadence():
    sc = scenario(duration=2.0)
    trace = run(sc)
    rows = round(2.0 / 0.01) // 10 + 1
    n = sc.swarm.n_robots
    assert trace.t.shape == (rows,)
    assert trace.theta.shape == (rows, n)
    assert trace.pos.shape == (rows, n, 3)
    assert trace.d_edge.shape == (rows, len(trace.edges))
    assert trace.modes.dtype == np.int8
    assert trace.t[0] == 0.0 and trace.t[-1] == pytest.approx(2.0)
    assert (np.diff(trace.t) > 0).all()


def test_rerun_is_bit_identical():
    sc = scenario(duration=3.0, targets={"count": 20, "speed": 1.0},
                  options={"measurement_noise": 0.1, "initial_perturbation": 0.05})

    def fingerprint():
        tr = run(sc)
        return (tr.theta.tobytes(), tr.pos.tobytes(),
                tuple(sorted(tr.summary.items())))

    assert fingerprint() == fingerprint()


def test_failure_cycle_exits_and_rejoins():
    sc = scenario(
        duration=40.0,
        failures=[{"robot": 2, "start": 1.0, "duration": 4.0,
                   "kind": "type2"}],
        options={"p_out": [25.0, 25.0, 0.0], "exit_speed": 10.0},
    )
    trace = run(sc)
    kinds = [e["kind"] for e in trace.events]
    assert "failure" in kinds
    assert "rejoin_start" in kinds
    assert "rejoined" in kinds
    assert kinds.index("failure") < kinds.index("rejoin_start")
    assert (trace.modes[-1] == 0).all()
    assert trace.summary["final_spacing_deviation"] < 1e-2
    # while the robot was away the other four held the five-slot pattern
    away = (trace.modes[:, 2] != 0)
    assert away.any()
    live_dev = [
        spacing_deviation(trace.theta[k], sc.eq, trace.modes[k] == 0)
        for k in np.flatnonzero(away)
    ]
    assert max(live_dev) < 0.05


def test_absent_robot_stays_out():
    sc = scenario(
        duration=5.0,
        failures=[{"robot": 0, "start": 0.0, "kind": "absent"}],
        options={"preseed_spacing": True},
    )
    trace = run(sc)
    assert (trace.modes[-1] == 0).sum() == 4
    assert trace.modes[-1][0] != 0
    # the parked robot sits outside the mission rectangle
    assert np.abs(trace.pos[-1, 0, :2]).min() > 20.0


def test_nan_state_aborts_with_dump():
    sim = Simulation(scenario(duration=1.0))
    sim.robots[1].theta = math.nan
    with pytest.raises(SimulationError) as exc:
        sim._check_finite(7, 0.07)
    dump = exc.value.dump
    assert dump["tick"] == 7
    assert math.isnan(dump["theta"][1])


def test_detection_times_recorded_in_events():
    trace = run(scenario(duration=5.0, targets={"count": 30, "speed": 1.0}))
    det = [e for e in trace.events if e["kind"] == "detection"]
    assert trace.summary["targets_detected"] == len(det)
    assert trace.summary["all_detected"]
    assert trace.summary["max_detection_time"] <= 5.0
