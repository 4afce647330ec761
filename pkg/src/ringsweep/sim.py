"""Scenario engine: the per-tick robot loop, targets, coverage, and metrics.

Each tick follows one pipeline per robot: project the measured position onto
the path to recover the phase, couple it against the freshest neighbor
phases (spoofed stand-ins included), integrate the desired phase, evaluate
the path point as the tracking reference (plus any z-axis safety offset),
and move, either through the jerk-limited tracker or by pinning the
kinematics to the reference in ideal mode. Failed robots follow their
protocol mode instead: they fall silent, retreat to the parking point, and
later steer back to their inferred phase slot.

Everything random flows from the scenario seed through fixed per-subsystem
streams, so a rerun of the same scenario is reproducible bit for bit.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .coordination import equilibrium_phases, order_residual, ring_topology
from .curve import LissajousParams, min_pairwise_separation
from .netsim import Network
from .planning import check_guarantees
from .resilience import (
    CAUSE_INJECTED,
    MODE_EXITING,
    MODE_FAILED,
    MODE_NOMINAL,
    MODE_REJOINING,
    ProtocolConfig,
    RobotProtocol,
    default_eps_th,
    feasibility_check,
    wrap_angle,
)
from .tracker import BatchMpcSolver, propagate

MODE_CODES = {MODE_NOMINAL: 0, MODE_FAILED: 1, MODE_EXITING: 2, MODE_REJOINING: 3}

# how close the tracker must pull a rejoining robot to its slot point
# before the phase guard is allowed to close
ON_CURVE_MPC = 0.5

# correlation time of the gust disturbance acting on tracked robots
GUST_CORRELATION_TIME = 2.0


class SimulationError(RuntimeError):
    """Aborted run; carries a diagnostic dump of the offending tick."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class GuaranteeRefusal(RuntimeError):
    """Scenario rejected because the mission bounds do not hold."""

    def __init__(self, report):
        super().__init__(
            "mission guarantees violated: " + ", ".join(report.violated)
        )
        self.report = report


def baseline_openloop_rate(params):
    """Phase rate of the no-feedback baseline: the constant sweep rate."""
    return params.omega


@dataclass
class RobotState:
    """One robot's live state; protocol state lives in .protocol."""

    id: int
    theta: float
    theta_desired: float
    kinematic: np.ndarray
    protocol: RobotProtocol
    neighbor_estimates: dict = field(default_factory=dict)
    jerk: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rejoin_theta: float = 0.0
    on_curve: bool = True

    @property
    def position(self):
        return self.kinematic[0::3]

    @property
    def mode(self):
        return self.protocol.status.mode

    @property
    def failure(self):
        return self.protocol.status


@dataclass
class Target:
    position: np.ndarray
    speed_max: float
    detected_at: float = None


class TargetField:
    """Random-waypoint targets confined to the mission rectangle."""

    def __init__(self, count, speed, half_extents, rng):
        self.speed = float(speed)
        self.rect = np.asarray(half_extents, dtype=float)
        self.rng = rng
        lo, hi = -self.rect, self.rect
        self.positions = rng.uniform(lo, hi, size=(count, 2))
        self.waypoints = rng.uniform(lo, hi, size=(count, 2))
        self.detected_at = np.full(count, np.nan)

    def __len__(self):
        return len(self.positions)

    def step(self, dt):
        if self.speed == 0.0 or not len(self):
            return
        delta = self.waypoints - self.positions
        dist = np.hypot(delta[:, 0], delta[:, 1])
        reach = self.speed * dt
        arrive = dist <= reach
        move = ~arrive & (dist > 0)
        self.positions[arrive] = self.waypoints[arrive]
        self.positions[move] += delta[move] * (reach / dist[move])[:, None]
        n_new = int(arrive.sum())
        if n_new:
            self.waypoints[arrive] = self.rng.uniform(
                -self.rect, self.rect, size=(n_new, 2)
            )
        np.clip(self.positions, -self.rect, self.rect, out=self.positions)

    def targets(self):
        return [
            Target(self.positions[k].copy(), self.speed,
                   None if math.isnan(self.detected_at[k])
                   else float(self.detected_at[k]))
            for k in range(len(self))
        ]


def update_targets(field_, dt):
    """Advance random-waypoint motion by dt."""
    field_.step(dt)
    return field_


def check_detection(field_, robot_xy, r_s, active, now):
    """Mark undetected targets within r_s (x-y) of any active robot."""
    if not len(field_):
        return field_
    robot_xy = np.asarray(robot_xy, dtype=float)[np.asarray(active, bool)]
    if len(robot_xy) == 0:
        return field_
    undet = np.isnan(field_.detected_at)
    if not undet.any():
        return field_
    diff = field_.positions[undet, None, :] - robot_xy[None, :, :]
    hit = (np.einsum("tri,tri->tr", diff, diff) <= r_s * r_s).any(axis=1)
    idx = np.flatnonzero(undet)[hit]
    field_.detected_at[idx] = now
    return field_


class CoverageGrid:
    """Union of sensed disks, accumulated on a fixed cell grid."""

    def __init__(self, half_extents, cell):
        A, B = half_extents
        self.cell = float(cell)
        nx = max(1, int(round(2 * A / cell)))
        ny = max(1, int(round(2 * B / cell)))
        xs = -A + cell * (np.arange(nx) + 0.5)
        ys = -B + cell * (np.arange(ny) + 0.5)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        self.centers = np.column_stack([gx.ravel(), gy.ravel()])
        self.covered = np.zeros(len(self.centers), dtype=bool)
        self.first_covered = np.full(len(self.centers), np.nan)

    @property
    def fraction(self):
        return float(self.covered.mean()) if len(self.covered) else 0.0

    def update(self, robot_xy, r_s, active, now):
        robot_xy = np.asarray(robot_xy, dtype=float)[np.asarray(active, bool)]
        if len(robot_xy) == 0:
            return self
        open_idx = np.flatnonzero(~self.covered)
        if len(open_idx) == 0:
            return self
        diff = self.centers[open_idx, None, :] - robot_xy[None, :, :]
        hit = (np.einsum("cri,cri->cr", diff, diff) <= r_s * r_s).any(axis=1)
        marked = open_idx[hit]
        self.covered[marked] = True
        self.first_covered[marked] = now
        return self


def update_coverage(grid, robot_xy, r_s, active, now):
    return grid.update(robot_xy, r_s, active, now)


def z_safety(positions, threshold, offset):
    """Vertical evasion: lift the lower-id robot of any too-close x-y pair.

    Returns per-robot z adjustments; x-y references are never touched.
    """
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    adj = np.zeros(n)
    if n < 2:
        return adj
    diff = pos[:, None, :2] - pos[None, :, :2]
    close = np.einsum("ijk,ijk->ij", diff, diff) < threshold * threshold
    iu = np.triu_indices(n, k=1)
    for i, j in zip(*iu):
        if close[i, j]:
            adj[i] = offset
    return adj


def spacing_deviation(thetas, eq, live=None):
    """Worst wrapped deviation of adjacent live spacings from equilibrium.

    Walks the ring in index order, skipping non-live robots; a gap of g
    skipped slots is expected to span g+1 nominal spacings.
    """
    n = eq.n_robots
    live = np.ones(n, dtype=bool) if live is None else np.asarray(live, bool)
    ids = [i for i in range(n) if live[i]]
    if len(ids) < 2:
        return 0.0
    worst = 0.0
    for k, i in enumerate(ids):
        j = ids[(k + 1) % len(ids)]
        hops = (j - i) % n
        want = eq.spacing * hops
        err = abs(wrap_angle(thetas[j] - thetas[i] - want))
        worst = max(worst, err)
    return worst


@dataclass
class SimTrace:
    """Fixed-cadence metric series for one run, plus events and summary."""

    t: np.ndarray
    theta: np.ndarray
    pos: np.ndarray
    d_edge: np.ndarray
    cos_edge: np.ndarray
    stale_edge: np.ndarray
    coverage_pct: np.ndarray
    detections: np.ndarray
    min_dist_3d: np.ndarray
    track_err: np.ndarray
    modes: np.ndarray
    edges: tuple
    events: list
    summary: dict
    scenario_name: str
    seed: int


def _rng(seed, stream):
    return np.random.default_rng([seed, stream])


class Simulation:
    """One scenario instance; call run() to produce the trace."""

    def __init__(self, scenario, initial_phases=None):
        sc = scenario
        self.sc = sc
        self.curve = sc.curve
        self.n = sc.swarm.n_robots
        self.dt = sc.swarm.dt
        self.topology = ring_topology(self.n)
        self.network = Network(self.topology, sc.network)
        self.edges = tuple(self.topology.edges())
        self._nbr_idx = np.array(
            [self.topology.neighbors(i) for i in range(self.n)]
        )
        opt = sc.options

        self.rng_disturbance = _rng(sc.seed, 1)
        self.rng_targets = _rng(sc.seed, 2)
        self.rng_init = _rng(sc.seed, 3)
        self.rng_measure = _rng(sc.seed, 4)
        self._gust = np.zeros((self.n, 3))

        if initial_phases is not None:
            phases = np.asarray(initial_phases, dtype=float).copy()
            if phases.shape != (self.n,):
                raise ValueError(f"need {self.n} initial phases")
        else:
            phases = equilibrium_phases(sc.eq.n_robots, sc.eq.p, sc.eq.theta0)
            if opt.initial_perturbation > 0:
                phases = phases + self.rng_init.uniform(
                    -opt.initial_perturbation, opt.initial_perturbation, self.n
                )

        eps_th = opt.eps_th or default_eps_th(self.n, sc.eq.p)
        self.protocol_cfg = ProtocolConfig(
            eps_th=eps_th,
            distance_limit=2.0 * sc.mission.eta * sc.mission.r_s,
            tau_fail=opt.tau_fail,
            capture_threshold=opt.capture_threshold,
            alpha=opt.alpha,
            spoof_stalled=opt.spoof_stalled,
        )
        self.p_out = (
            tuple(opt.p_out) if opt.p_out
            else (1.5 * sc.curve.A, 1.5 * sc.curve.B, 0.0)
        )

        self.robots = []
        for i in range(self.n):
            kin = np.zeros(9)
            kin[0::3] = self.curve.point(phases[i])
            kin[1::3] = self.curve.velocity(phases[i], sc.swarm.omega)
            proto = RobotProtocol(
                i, self.topology.neighbors(i), self.protocol_cfg, self.p_out
            )
            est = {}
            for j in self.topology.neighbors(i):
                est[j] = (float(phases[j]), 0.0)
                proto.last_theta[j] = float(phases[j])
                if opt.preseed_spacing:
                    proto.estimator.seed(j, phases[i] - phases[j])
            self.robots.append(RobotState(
                id=i, theta=float(phases[i]), theta_desired=float(phases[i]),
                kinematic=kin, protocol=proto, neighbor_estimates=est,
            ))

        self.solver = None
        self.control_period = 1
        if opt.tracker_mode == "mpc":
            self.solver = BatchMpcSolver(sc.tracker)
            self.control_period = opt.control_period or max(
                1, round(sc.tracker.dt / self.dt)
            )

        self.z_threshold = 0.0
        if opt.z_safety:
            if opt.z_threshold:
                self.z_threshold = opt.z_threshold
            else:
                # half the tightest x-y approach of the nominal pattern:
                # anything closer than that is an anomaly worth evading,
                # while routine passes never trigger a lift
                flat = LissajousParams(
                    self.curve.A, self.curve.B, 0.0, self.curve.a,
                    self.curve.b, self.curve.c, self.curve.phi,
                )
                self.z_threshold = 0.5 * min_pairwise_separation(
                    flat, self.n, samples=2**15
                )

        self.targets = TargetField(
            sc.targets.count, sc.targets.speed,
            (sc.curve.A, sc.curve.B), self.rng_targets,
        )
        cell = opt.coverage_cell or (0.5 if max(sc.curve.A, sc.curve.B) <= 50
                                     else 2.0)
        self.coverage = CoverageGrid((sc.curve.A, sc.curve.B), cell)
        self.coverage_radius = opt.coverage_radius or sc.mission.r_s

        # schedule: (time, robot, action) processed in time order
        self._schedule = []
        self._stall_until = {}
        for ev in sc.failures:
            if ev.kind == "stall":
                self._schedule.append((ev.start, ev.robot, "stall"))
                self._schedule.append((ev.start + ev.duration, ev.robot,
                                       "unstall"))
            else:
                self._schedule.append((ev.start, ev.robot, "fail"))
                if math.isfinite(ev.duration):
                    self._schedule.append((ev.start + ev.duration, ev.robot,
                                           "rejoin"))
                if ev.kind == "absent":
                    self._schedule.append((ev.start, ev.robot, "teleport_out"))
        self._schedule.sort(key=lambda item: (item[0], item[1]))
        self._next_event = 0

        self.events = []
        self._stalled = set()
        self._engaged_pairs = set()
        self.n_ticks = int(round(sc.duration / self.dt))
        self._log_rows = self.n_ticks // opt.log_period + 1
        self._alloc_trace()

    # --- trace buffers ---------------------------------------------------

    def _alloc_trace(self):
        L, n, e = self._log_rows, self.n, len(self.edges)
        self._T = {
            "t": np.zeros(L),
            "theta": np.zeros((L, n)),
            "pos": np.zeros((L, n, 3)),
            "d_edge": np.zeros((L, e)),
            "cos_edge": np.zeros((L, e)),
            "stale_edge": np.zeros((L, e)),
            "coverage_pct": np.zeros(L),
            "detections": np.zeros(L, dtype=int),
            "min_dist_3d": np.zeros(L),
            "track_err": np.zeros((L, n)),
            "modes": np.zeros((L, n), dtype=np.int8),
        }
        self._row = 0

    # --- helpers ---------------------------------------------------------

    def _positions(self):
        return np.array([r.kinematic[0::3] for r in self.robots])

    def _active_mask(self):
        return np.array([r.mode == MODE_NOMINAL for r in self.robots])

    def _transmitting(self, robot):
        return robot.mode in (MODE_NOMINAL, MODE_REJOINING)

    def _event(self, now, kind, **detail):
        self.events.append({"t": round(now, 9), "kind": kind, **detail})

    def _process_schedule(self, now):
        while self._next_event < len(self._schedule):
            at, rid, action = self._schedule[self._next_event]
            if at > now + 1e-9:
                break
            self._next_event += 1
            robot = self.robots[rid]
            if action == "fail":
                robot.protocol.fail(now, CAUSE_INJECTED)
                robot.protocol.start_exit(now)
                self._event(now, "failure", robot=rid, cause=CAUSE_INJECTED)
                failed = [r for r in self.robots if r.mode != MODE_NOMINAL]
                ok = feasibility_check(self.n, [r.theta for r in failed])
                self._event(now, "feasibility", feasible=bool(ok),
                            failed=[r.id for r in failed])
            elif action == "teleport_out":
                robot.kinematic[:] = 0.0
                robot.kinematic[0::3] = self.p_out
                robot.on_curve = False
            elif action == "rejoin":
                robot.protocol.start_rejoin(now)
                robot.rejoin_theta = robot.theta
                robot.on_curve = False
                self._event(now, "rejoin_start", robot=rid)
            elif action == "stall":
                self._stalled.add(rid)
                self._event(now, "stall_start", robot=rid)
            elif action == "unstall":
                self._stalled.discard(rid)
                self._event(now, "stall_end", robot=rid)

    def _communicate(self, k, now):
        if k % self.sc.options.comm_period == 0:
            for r in self.robots:
                if not self._transmitting(r):
                    continue
                theta = r.rejoin_theta if r.mode == MODE_REJOINING else r.theta
                for j in self.topology.neighbors(r.id):
                    self.network.send(r.id, j, theta, now)
        polled = {}
        for r in self.robots:
            msgs = self.network.poll(r.id, now)
            out = {}
            for j, msg in msgs.items():
                # the network hands back its freshest message every poll;
                # only a strictly newer send counts as a delivery here
                prev = r.neighbor_estimates.get(j)
                if msg is not None and (prev is None
                                        or msg.sent_at > prev[1]):
                    r.neighbor_estimates[j] = (msg.theta, msg.sent_at)
                    out[j] = msg.theta
                else:
                    out[j] = None
            polled[r.id] = out
        return polled

    def _project_phases(self, measured):
        """Update theta from measured positions for on-curve robots.

        The foot point is found by Gauss-Newton from the commanded phase:
        phase knowledge is continuous odometry, so the search must stay on
        the robot's own branch of the path. A global nearest-point search
        would hop branches wherever the path nearly touches itself, which
        position noise cannot disambiguate.
        """
        idx = [
            r.id for r in self.robots
            if r.mode == MODE_NOMINAL and r.on_curve
            and r.id not in self._stalled
        ]
        if not idx or self.sc.options.openloop:
            return
        pts = measured[idx]
        gamma = np.array([self.robots[i].theta_desired for i in idx])
        for _ in range(3):
            err = pts - self.curve.point(gamma)
            tan = self.curve.velocity(gamma, 1.0)
            gamma = gamma + np.einsum("ri,ri->r", err, tan) / \
                np.einsum("ri,ri->r", tan, tan)
        for pos_in_list, i in enumerate(idx):
            self.robots[i].theta = float(gamma[pos_in_list])

    # coupling entry kinds, per robot and neighbor slot
    _COUPLE_NONE = 0     # nothing known, contributes no force
    _COUPLE_ANCHOR = 1   # stale phase, dead-reckoned forward at omega
    _COUPLE_LIVE = 2     # fresh this tick: track the neighbor in-step
    _COUPLE_SPOOF = 3    # virtual stand-in at own phase minus spacing

    def _coupling(self, now, polled, positions):
        """Classify each neighbor slot for the phase integration.

        A phase received this very tick lets the integrator couple to the
        neighbor's evolving value through the substeps, which approximates
        the continuous exchange the equilibrium analysis assumes; at high
        gain the ring is numerically unstable without it. Older anchors
        are dead-reckoned forward at the sweep rate (symmetric staleness
        would otherwise retard the whole ring), and spoofed slots follow
        the robot's own phase so they never need refreshing.
        """
        opt = self.sc.options
        omega = self.sc.swarm.omega
        kinds = np.zeros((self.n, 2), dtype=np.uint8)
        vals = np.zeros((self.n, 2))
        fresh_limit = 0.5 * self.dt
        for r in self.robots:
            nbrs = self.topology.neighbors(r.id)
            stale = {j: self.network.staleness(r.id, j, now) for j in nbrs}
            if opt.resilience:
                dists = {
                    j: float(np.hypot(
                        positions[r.id, 0] - positions[j, 0],
                        positions[r.id, 1] - positions[j, 1],
                    ))
                    for j in nbrs
                }
                r.protocol.observe(now, r.theta, polled[r.id], stale, dists)
            for slot, j in enumerate(nbrs):
                if opt.resilience and j in r.protocol.failed_neighbors:
                    est = r.protocol.estimator.get(j)
                    if est is not None:
                        kinds[r.id, slot] = self._COUPLE_SPOOF
                        vals[r.id, slot] = est.delta_star
                        continue
                    # degraded: nothing better than the last known phase
                if j not in r.neighbor_estimates:
                    continue
                theta_j, sent = r.neighbor_estimates[j]
                if stale[j] <= fresh_limit:
                    kinds[r.id, slot] = self._COUPLE_LIVE
                else:
                    kinds[r.id, slot] = self._COUPLE_ANCHOR
                    vals[r.id, slot] = theta_j + omega * (now - sent)
        return kinds, vals

    def _advance_phases(self, kinds, vals):
        """Vectorized substepped phase integration.

        Live entries track the neighbor's evolving phase through the
        substeps (all rows advance together), anchored entries advance at
        the sweep rate from their dead-reckoned value, and spoofed entries
        follow the row's own phase at the captured spacing.
        """
        sw = self.sc.swarm
        th = np.array([r.theta for r in self.robots])
        if self.sc.options.openloop:
            return th + sw.omega * self.dt
        h = self.dt / sw.substeps
        nbr = self._nbr_idx
        if (kinds == self._COUPLE_LIVE).all():
            for _ in range(sw.substeps):
                rate = sw.omega - sw.coupling * np.sin(
                    th[nbr] - th[:, None]
                ).sum(axis=1)
                th = th + h * rate
            return th
        live = kinds == self._COUPLE_LIVE
        spoof = kinds == self._COUPLE_SPOOF
        dead = kinds == self._COUPLE_NONE
        tau = 0.0
        for _ in range(sw.substeps):
            phase = np.where(
                live, th[nbr],
                np.where(spoof, th[:, None] - vals, vals + sw.omega * tau),
            )
            force = np.sin(phase - th[:, None])
            force[dead] = 0.0
            th = th + h * (sw.omega - sw.coupling * force.sum(axis=1))
            tau += h
        return th

    def _live_thetas_for(self, robot, now):
        """Fresh, believed-live neighbor phases, for rejoin steering."""
        out = {}
        for j in self.topology.neighbors(robot.id):
            if j in robot.protocol.failed_neighbors:
                continue
            if self.network.staleness(robot.id, j, now) > self.protocol_cfg.tau_fail:
                continue
            if j in robot.neighbor_estimates:
                out[j] = robot.neighbor_estimates[j][0]
        return out

    def _references(self, theta_next, zadj):
        """Per-robot reference windows (pos, vel) for the tracker."""
        cfg = self.sc.tracker
        omega = self.sc.swarm.omega
        steps = np.arange(1, cfg.horizon + 1)
        base = theta_next[:, None] + omega * cfg.dt * steps[None, :]
        ref_pos = self.curve.point(base)
        ref_vel = self.curve.velocity(base, omega)
        for r in self.robots:
            i = r.id
            if i in self._stalled and r.mode == MODE_NOMINAL:
                ref_pos[i] = self.curve.point(r.theta)
                ref_vel[i] = 0.0
            elif r.mode in (MODE_FAILED, MODE_EXITING):
                ref_pos[i] = self.p_out
                ref_vel[i] = 0.0
            elif r.mode == MODE_REJOINING:
                win = r.rejoin_theta + omega * cfg.dt * steps
                ref_pos[i] = self.curve.point(win)
                ref_vel[i] = self.curve.velocity(win, omega)
        ref_pos[:, :, 2] += zadj[:, None]
        return ref_pos, ref_vel

    def _move_ideal(self, theta_next, zadj):
        opt = self.sc.options
        step = opt.exit_speed * self.dt
        for r in self.robots:
            i = r.id
            old = r.kinematic[0::3].copy()
            if r.mode == MODE_NOMINAL and i in self._stalled:
                r.theta_desired = r.theta
                new = old
            elif r.mode == MODE_NOMINAL:
                r.theta_desired = float(theta_next[i])
                new = self.curve.point(r.theta_desired)
                new = new + np.array([0.0, 0.0, zadj[i]])
            elif r.mode in (MODE_FAILED, MODE_EXITING):
                new = self._step_toward(old, np.array(self.p_out), step)
            else:  # rejoining
                slot = self.curve.point(r.rejoin_theta)
                if np.linalg.norm(old - slot) <= step:
                    new = slot
                    r.on_curve = True
                else:
                    new = self._step_toward(old, slot, step)
            r.kinematic[1::3] = (new - old) / self.dt
            r.kinematic[0::3] = new
            r.kinematic[2::3] = 0.0

    @staticmethod
    def _step_toward(pos, goal, step):
        delta = goal - pos
        dist = np.linalg.norm(delta)
        if dist <= step:
            return goal.copy()
        return pos + delta * (step / dist)

    def _move_mpc(self, k, theta_next, zadj):
        for r in self.robots:
            if r.mode != MODE_NOMINAL:
                continue
            if r.id in self._stalled:
                r.theta_desired = r.theta
            else:
                r.theta_desired = float(theta_next[r.id])
        if k % self.control_period == 0:
            ref_pos, ref_vel = self._references(theta_next, zadj)
            states = np.array([r.kinematic for r in self.robots])
            jerk0, _, _ = self.solver.solve(states, ref_pos, ref_vel)
            for r in self.robots:
                r.jerk = jerk0[r.id]
        opt = self.sc.options
        noise = None
        if opt.disturbance > 0:
            # gust-like acceleration: an Ornstein-Uhlenbeck process whose
            # stationary std is opt.disturbance; per-tick white noise would
            # average out below the control rate and never deflect the track
            tau = GUST_CORRELATION_TIME
            self._gust += (
                -self._gust * (self.dt / tau)
                + opt.disturbance * math.sqrt(2.0 * self.dt / tau)
                * self.rng_disturbance.standard_normal((self.n, 3))
            )
            noise = self._gust
        for r in self.robots:
            r.kinematic = propagate(r.kinematic, r.jerk, self.dt)
            if noise is not None:
                r.kinematic[0::3] += 0.5 * noise[r.id] * self.dt**2
                r.kinematic[1::3] += noise[r.id] * self.dt
            if r.mode == MODE_REJOINING and not r.on_curve:
                slot = self.curve.point(r.rejoin_theta)
                if np.linalg.norm(r.kinematic[0::3] - slot) <= ON_CURVE_MPC:
                    r.on_curve = True

    def _steer_rejoins(self, now):
        opt = self.sc.options
        rate = opt.rejoin_phase_rate or 10.0 * self.sc.swarm.omega
        for r in self.robots:
            if r.mode != MODE_REJOINING:
                continue
            live = self._live_thetas_for(r, now)
            target = r.protocol.try_finish_rejoin(
                now, r.rejoin_theta, live, allow_complete=r.on_curve
            )
            if r.protocol.status.mode == MODE_NOMINAL:
                r.theta = r.rejoin_theta
                r.theta_desired = r.rejoin_theta
                self._event(now, "rejoined", robot=r.id)
                continue
            if target is not None:
                delta = wrap_angle(target - r.rejoin_theta)
                delta = max(-rate * self.dt, min(rate * self.dt, delta))
                r.rejoin_theta += delta
            r.theta = r.rejoin_theta

    def _z_adjustments(self, positions):
        if self.z_threshold <= 0:
            return np.zeros(self.n), set()
        adj = z_safety(positions, self.z_threshold, self.sc.options.z_offset)
        engaged = set()
        diff = positions[:, None, :2] - positions[None, :, :2]
        close = np.einsum("ijk,ijk->ij", diff, diff) < self.z_threshold**2
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if close[i, j]:
                    engaged.add((i, j))
        return adj, engaged

    def _record(self, k, now):
        opt = self.sc.options
        if k % opt.log_period != 0:
            return
        T, row = self._T, self._row
        pos = self._positions()
        th = np.array([r.theta for r in self.robots])
        T["t"][row] = now
        T["theta"][row] = th
        T["pos"][row] = pos
        for e, (i, j) in enumerate(self.edges):
            T["d_edge"][row, e] = math.hypot(
                pos[i, 0] - pos[j, 0], pos[i, 1] - pos[j, 1]
            )
            T["cos_edge"][row, e] = math.cos(th[i] - th[j])
            T["stale_edge"][row, e] = max(
                self.network.staleness(i, j, now),
                self.network.staleness(j, i, now),
            )
        T["coverage_pct"][row] = 100.0 * self.coverage.fraction
        T["detections"][row] = int(np.isfinite(self.targets.detected_at).sum())
        active = self._active_mask()
        T["min_dist_3d"][row] = self._min_distance(pos, active)
        for r in self.robots:
            if r.mode == MODE_NOMINAL:
                goal = self.curve.point(r.theta_desired)
            elif r.mode == MODE_REJOINING:
                goal = self.curve.point(r.rejoin_theta)
            else:
                goal = np.array(self.p_out)
            T["track_err"][row, r.id] = float(
                np.linalg.norm(r.kinematic[0::3] - goal)
            )
            T["modes"][row, r.id] = MODE_CODES[r.mode]
        self._row += 1

    @staticmethod
    def _min_distance(pos, mask):
        pts = pos[mask]
        if len(pts) < 2:
            return math.inf
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        iu = np.triu_indices(len(pts), k=1)
        return float(np.sqrt(d2[iu].min()))

    def _check_finite(self, k, now):
        kin = np.array([r.kinematic for r in self.robots])
        th = np.array([r.theta for r in self.robots])
        if np.isfinite(kin).all() and np.isfinite(th).all():
            return
        dump = {
            "tick": k,
            "t": now,
            "theta": th.tolist(),
            "kinematic": kin.tolist(),
            "modes": [r.mode for r in self.robots],
            "recent_events": self.events[-10:],
        }
        raise SimulationError(
            f"non-finite state at t={now:.3f} (tick {k})", dump
        )

    # --- main loop -------------------------------------------------------

    def run(self):
        sc = self.sc
        opt = sc.options
        meas_sigma = opt.measurement_noise
        for k in range(self.n_ticks + 1):
            now = k * self.dt
            self._process_schedule(now)

            positions = self._positions()
            measured = positions
            if meas_sigma > 0:
                measured = positions + meas_sigma * \
                    self.rng_measure.standard_normal((self.n, 3))
            self._project_phases(measured)

            polled = self._communicate(k, now)
            kinds, vals = self._coupling(now, polled, positions)
            self._steer_rejoins(now)

            check_detection(
                self.targets, positions[:, :2], sc.mission.r_s,
                self._active_mask(), now,
            )
            if k % opt.coverage_period == 0:
                update_coverage(
                    self.coverage, positions[:, :2], self.coverage_radius,
                    self._active_mask(), now,
                )
            self._record(k, now)
            self._check_finite(k, now)
            if k == self.n_ticks:
                break

            theta_next = self._advance_phases(kinds, vals)
            zadj, engaged = self._z_adjustments(positions)
            for pair in engaged - self._engaged_pairs:
                self._event(now, "z_engage", pair=list(pair))
            self._engaged_pairs = engaged
            if opt.tracker_mode == "ideal":
                self._move_ideal(theta_next, zadj)
            else:
                self._move_mpc(k, theta_next, zadj)
            if opt.openloop:
                for r in self.robots:
                    r.theta = float(theta_next[r.id])
                    r.theta_desired = r.theta
            self.targets.step(self.dt)

        for idx in np.flatnonzero(np.isfinite(self.targets.detected_at)):
            self._event(
                float(self.targets.detected_at[idx]), "detection",
                target=int(idx),
            )
        self.events.sort(key=lambda ev: (ev["t"], ev["kind"]))
        return self._finish()

    def _finish(self):
        T = self._T
        live = self._active_mask()
        th = np.array([r.theta for r in self.robots])
        det = self.targets.detected_at
        detected = np.isfinite(det)
        cov = T["coverage_pct"]
        summary = {
            "min_distance_3d": float(np.nanmin(
                np.where(np.isfinite(T["min_dist_3d"]), T["min_dist_3d"],
                         np.nan)
            )) if np.isfinite(T["min_dist_3d"]).any() else math.inf,
            "min_adjacent_xy": float(T["d_edge"].min())
            if T["d_edge"].size else math.inf,
            "max_tracking_error": float(T["track_err"].max()),
            "coverage_final_pct": float(cov[-1]),
            "coverage_t90": self._milestone(cov, 90.0),
            "coverage_t99": self._milestone(cov, 99.0),
            "coverage_t995": self._milestone(cov, 99.5),
            "targets_total": int(len(self.targets)),
            "targets_detected": int(detected.sum()),
            "mean_detection_time": float(det[detected].mean())
            if detected.any() else math.nan,
            "max_detection_time": float(det[detected].max())
            if detected.any() else math.nan,
            "all_detected": bool(detected.all()) if len(det) else True,
            "final_order_residual": float(order_residual(th, self.topology)),
            "final_spacing_deviation": float(
                spacing_deviation(th, self.sc.eq, live)
            ),
            "failures": sum(1 for e in self.events if e["kind"] == "failure"),
            "z_engagements": sum(
                1 for e in self.events if e["kind"] == "z_engage"
            ),
        }
        return SimTrace(
            t=T["t"], theta=T["theta"], pos=T["pos"], d_edge=T["d_edge"],
            cos_edge=T["cos_edge"], stale_edge=T["stale_edge"],
            coverage_pct=T["coverage_pct"], detections=T["detections"],
            min_dist_3d=T["min_dist_3d"], track_err=T["track_err"],
            modes=T["modes"], edges=self.edges, events=self.events,
            summary=summary, scenario_name=self.sc.name, seed=self.sc.seed,
        )

    def _milestone(self, cov, level):
        hit = np.flatnonzero(cov >= level)
        return float(self._T["t"][hit[0]]) if len(hit) else math.nan


def run(scenario, initial_phases=None):
    """Guarantee-checked scenario execution."""
    report = check_guarantees(
        scenario.mission, scenario.curve, scenario.swarm.omega,
        scenario.swarm.n_robots,
    )
    if not report.ok and not scenario.override_guarantees:
        raise GuaranteeRefusal(report)
    return Simulation(scenario, initial_phases=initial_phases).run()
