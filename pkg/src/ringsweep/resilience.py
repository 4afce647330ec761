"""Failure detection, virtual-agent spoofing, and the exit/rejoin protocol.

Each robot runs an independent supervisor over its own mode and its view of
its two ring neighbors. A neighbor that goes quiet for too long or drifts
too far away is declared failed; from then on the supervisor feeds the
phase coupling a virtual stand-in pinned at the learned equilibrium spacing
from the robot's own phase, which leaves the splay equilibrium of the
remaining ring unchanged. A robot that fails retreats to a parking point
outside the mission space, and on recovery steers back to the phase slot
inferred from a live neighbor, only resuming nominal operation when the
spacing error closes below a threshold.

Spacing estimates are learned online: whenever the local coupling residual
shows the ring is essentially at equilibrium, the current phase differences
are captured and exponentially smoothed, so the protocol needs no central
knowledge of N, p, or who is where.
"""

import itertools
import math
from dataclasses import dataclass

TWO_PI = 2.0 * math.pi

MODE_NOMINAL = "nominal"
MODE_FAILED = "failed"
MODE_EXITING = "exiting"
MODE_REJOINING = "rejoining"

_ALLOWED = {
    (MODE_NOMINAL, MODE_FAILED),
    (MODE_FAILED, MODE_EXITING),
    (MODE_EXITING, MODE_REJOINING),
    (MODE_REJOINING, MODE_NOMINAL),
}

CAUSE_STALE = "stale_comm"
CAUSE_DISTANCE = "distance_violation"
CAUSE_INJECTED = "injected"


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    w = math.fmod(x + math.pi, TWO_PI)
    if w <= 0.0:
        w += TWO_PI
    return w - math.pi


@dataclass
class FailureStatus:
    mode: str = MODE_NOMINAL
    since: float = 0.0
    cause: str = None

    def advance(self, mode, now, cause=None):
        if (self.mode, mode) not in _ALLOWED:
            raise ValueError(f"illegal mode transition {self.mode} -> {mode}")
        self.mode = mode
        self.since = float(now)
        if cause is not None:
            self.cause = cause
        if mode == MODE_NOMINAL:
            self.cause = None


@dataclass(frozen=True)
class SpacingEstimate:
    delta_star: float   # equilibrium value of theta_self - theta_neighbor
    confidence: float   # coupling residual when last captured

    def __post_init__(self):
        mag = abs(self.delta_star)
        if not 0.0 < mag < TWO_PI:
            raise ValueError(
                f"spacing magnitude must be in (0, 2 pi), got {self.delta_star}"
            )


@dataclass(frozen=True)
class ProtocolConfig:
    eps_th: float                 # rad, closes the rejoin guard
    distance_limit: float         # m, neighbor x-y distance that means failed
    tau_fail: float = 1.0         # s of silence that means failed
    capture_threshold: float = 0.05  # residual below which spacing is captured
    alpha: float = 0.05           # smoothing weight per capture
    spoof_stalled: bool = False   # also spoof a neighbor whose phase froze
    stall_time: float = 1.0       # s of frozen phase that counts as a stall

    def __post_init__(self):
        if self.eps_th <= 0 or self.distance_limit <= 0 or self.tau_fail <= 0:
            raise ValueError("thresholds must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")


def default_eps_th(n_robots, p):
    """15% of the nominal splay spacing."""
    return 0.15 * TWO_PI * p / n_robots


class SpacingEstimator:
    """Per-robot online estimate of equilibrium phase offsets to neighbors."""

    def __init__(self, neighbors, alpha=0.05):
        self.alpha = alpha
        self._est = {j: None for j in neighbors}

    def estimate_spacing(self, theta_i, neighbor_thetas, residual, threshold):
        """Capture spacing when the ring looks settled; returns new estimates.

        No capture happens while the residual is at or above the threshold,
        so transients and rejoin maneuvers never pollute the estimate.
        """
        if threshold <= 0:
            raise ValueError(f"threshold must be positive, got {threshold}")
        if abs(residual) >= threshold:
            return {}
        updated = {}
        for j, theta_j in neighbor_thetas.items():
            delta = wrap_angle(theta_i - theta_j)
            if delta == 0.0:
                continue
            prev = self._est.get(j)
            if prev is None:
                est = SpacingEstimate(delta_star=delta, confidence=abs(residual))
            else:
                blended = wrap_angle(
                    prev.delta_star
                    + self.alpha * wrap_angle(delta - prev.delta_star)
                )
                if blended == 0.0:
                    continue
                est = SpacingEstimate(delta_star=blended, confidence=abs(residual))
            self._est[j] = est
            updated[j] = est
        return updated

    def get(self, neighbor):
        return self._est.get(neighbor)

    def seed(self, neighbor, delta_star):
        """Install a known spacing directly (used for design-time preloads)."""
        self._est[neighbor] = SpacingEstimate(
            delta_star=wrap_angle(delta_star), confidence=math.inf
        )


def detect_failure(staleness, d_ij, config, injected=False):
    """Decide whether a neighbor counts as failed, and why.

    Silence and excessive separation are the two observable symptoms; an
    injected event (scripted failure the robot knows about) always counts.
    """
    if injected:
        return True, CAUSE_INJECTED
    if staleness > config.tau_fail:
        return True, CAUSE_STALE
    if d_ij > config.distance_limit:
        return True, CAUSE_DISTANCE
    return False, None


def spoof_virtual(theta_i, estimate):
    """Phase of the virtual stand-in for a failed neighbor.

    delta_star stores self minus neighbor, so the neighbor's slot relative
    to the robot's own phase is found by subtracting it. Anchoring to the
    robot's own phase keeps the relative spacing exact as the ring drifts.
    """
    if estimate is None:
        raise ValueError("cannot spoof without a spacing estimate")
    return theta_i - estimate.delta_star


@dataclass(frozen=True)
class MotionDirective:
    kind: str                  # "exit" | "hold" | "track_phase"
    position: tuple = None     # for "exit"
    phase: float = None        # for "track_phase"


def exit_to_pout(p_out):
    """Directive sending a failed robot to the parking point."""
    return MotionDirective(kind="exit", position=tuple(float(v) for v in p_out))


def rejoin_target(theta_neighbor, estimate):
    """Phase slot a recovering robot should steer to, from a live neighbor."""
    if estimate is None:
        raise ValueError("cannot rejoin without a spacing estimate")
    return theta_neighbor + estimate.delta_star


def rejoin_complete(theta_i, theta_neighbor, estimate, eps_th):
    """True when the spacing error to the inferred slot has closed."""
    return abs(wrap_angle(theta_neighbor - theta_i + estimate.delta_star)) <= eps_th


def feasibility_check(n_robots, failed_phases):
    """Whether detection guarantees survive the current set of failures.

    At most floor(N/2) robots may be out, and no two failed phases may sit
    half a cycle or more apart (the paper leaves the phase set informal; we
    read it as the phases of the failed robots and apply the mod test
    literally to each pair).
    """
    failed = list(failed_phases)
    if len(failed) > n_robots // 2:
        return False
    for a, b in itertools.combinations(failed, 2):
        if math.fmod(abs(a - b), TWO_PI) >= math.pi:
            return False
    return True


class RobotProtocol:
    """Algorithm-level supervisor for one robot.

    Owns the robot's failure mode, its spacing estimator, and its opinion of
    each neighbor. The simulation feeds it observations once per tick and
    reads back the neighbor phases to use for coupling plus any motion
    directive that overrides nominal path tracking.
    """

    def __init__(self, robot, neighbors, config, p_out=(0.0, 0.0, 0.0)):
        self.robot = robot
        self.neighbors = tuple(neighbors)
        self.config = config
        self.p_out = tuple(p_out)
        self.status = FailureStatus()
        self.estimator = SpacingEstimator(neighbors, alpha=config.alpha)
        self.failed_neighbors = {}        # id -> cause
        self.last_theta = {}              # id -> freshest known phase
        self._last_change = {}            # id -> (theta, time) for stall watch
        self.degraded = False             # spoofing without an estimate

    # --- self mode -----------------------------------------------------

    def fail(self, now, cause=CAUSE_INJECTED):
        self.status.advance(MODE_FAILED, now, cause)
        return exit_to_pout(self.p_out)

    def start_exit(self, now):
        self.status.advance(MODE_EXITING, now)
        return exit_to_pout(self.p_out)

    def start_rejoin(self, now):
        self.status.advance(MODE_REJOINING, now)

    def try_finish_rejoin(self, now, theta_i, live_neighbor_thetas,
                          allow_complete=True):
        """Close the rejoin once any live neighbor confirms the spacing.

        Returns the phase target to steer toward meanwhile, or None when no
        live neighbor with an estimate exists yet (rejoin deferred). With
        allow_complete False only the steering target is computed, for
        callers that must hold the mode until the robot is physically back
        on the path.
        """
        target = None
        for j, theta_j in live_neighbor_thetas.items():
            est = self.estimator.get(j)
            if est is None:
                continue
            target = rejoin_target(theta_j, est)
            if allow_complete and rejoin_complete(
                theta_i, theta_j, est, self.config.eps_th
            ):
                self.status.advance(MODE_NOMINAL, now)
                return None
        return target

    # --- neighbor view -------------------------------------------------

    def observe(self, now, theta_i, polled, staleness, distances, residual=None):
        """Update neighbor bookkeeping from one tick's communications.

        polled maps neighbor -> freshest phase or None; staleness and
        distances map neighbor -> scalar. residual defaults to the local
        coupling residual over live neighbors. Returns the phases to feed
        the coupling, spoofing failed neighbors from the robot's own phase.
        """
        cfg = self.config
        for j in self.neighbors:
            theta_j = polled.get(j)
            if theta_j is not None:
                prev = self._last_change.get(j)
                if prev is None or theta_j != prev[0]:
                    self._last_change[j] = (theta_j, now)
                self.last_theta[j] = theta_j

        live = {
            j: self.last_theta[j]
            for j in self.neighbors
            if j not in self.failed_neighbors and j in self.last_theta
        }
        if residual is None:
            residual = abs(
                sum(math.sin(tj - theta_i) for tj in live.values())
            ) if len(live) == len(self.neighbors) else math.inf
        # capture spacing only from phases received this tick: a silent
        # neighbor's frozen last value must not keep feeding the estimate
        # while the staleness watchdog counts toward declaring it failed
        fresh = {
            j: th for j, th in live.items()
            if polled.get(j) is not None
        }
        if fresh:
            self.estimator.estimate_spacing(
                theta_i, fresh, residual, cfg.capture_threshold
            )

        # a robot that has itself left the pattern cannot trust its own
        # distance or staleness view, so it stops judging its neighbors
        monitoring = self.status.mode == MODE_NOMINAL
        coupling = {}
        degraded = False
        for j in self.neighbors:
            failed, cause = (False, None)
            if monitoring:
                failed, cause = detect_failure(
                    staleness.get(j, math.inf), distances.get(j, 0.0), cfg
                )
                if not failed and cfg.spoof_stalled:
                    seen = self._last_change.get(j)
                    if seen is not None and now - seen[1] > cfg.stall_time:
                        failed, cause = True, CAUSE_STALE
            if j in self.failed_neighbors:
                if not failed and self._rejoin_confirmed(theta_i, j):
                    del self.failed_neighbors[j]
                else:
                    failed = True
            elif failed:
                self.failed_neighbors[j] = cause

            if failed:
                est = self.estimator.get(j)
                if est is not None:
                    coupling[j] = spoof_virtual(theta_i, est)
                elif j in self.last_theta:
                    coupling[j] = self.last_theta[j]
                    degraded = True
            elif j in self.last_theta:
                coupling[j] = self.last_theta[j]
        self.degraded = degraded
        return coupling

    def _rejoin_confirmed(self, theta_i, j):
        """A failed neighbor is reinstated once its reported phase is back
        in the spoofed slot, mirroring its own rejoin guard."""
        est = self.estimator.get(j)
        theta_j = self.last_theta.get(j)
        if theta_j is None:
            return True   # nothing better to hold against it
        if est is None:
            return True
        slot = spoof_virtual(theta_i, est)
        return abs(wrap_angle(theta_j - slot)) <= self.config.eps_th
