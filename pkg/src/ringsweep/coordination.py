"""Repulsive phase coupling on a ring and its splay equilibria.

Each robot advances a curve parameter theta_i by

    dtheta_i/dt = omega - K * sum_{j in ring neighbors} sin(theta_j - theta_i)

The negative (repulsive) coupling drives the fleet toward equally spaced
phase patterns theta_i = theta_0 + 2pi p (i - 1) / N instead of clumping.
Patterns with N/4 < p < 3N/4 are the locally stable ones, and gcd(N, p)
robots share each phase slot.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SwarmParams:
    """Fleet-level coupling constants.

    substeps splits each integration step of length dt into equal Euler
    substeps; the product K * dt / substeps must stay at or below 0.5 or the
    explicit integration is rejected as unstable.
    """

    n_robots: int
    omega: float
    coupling: float
    dt: float
    substeps: int = 1

    def __post_init__(self):
        if self.n_robots < 2:
            raise ValueError(f"need at least 2 robots, got {self.n_robots}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.coupling < 0:
            raise ValueError(f"coupling must be non-negative, got {self.coupling}")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")
        gain = self.coupling * self.dt / self.substeps
        if gain > 0.5:
            needed = math.ceil(self.coupling * self.dt / 0.5)
            raise ValueError(
                f"explicit phase integration is unstable: K*dt/substeps = "
                f"{gain:.3g} exceeds 0.5; use substeps >= {needed} or a smaller gain"
            )


@dataclass(frozen=True)
class EquilibriumSpec:
    """A splay pattern: phase i sits at theta0 + 2pi p i / N (0-based i)."""

    n_robots: int
    p: int
    theta0: float = 0.0

    @property
    def spacing(self):
        return 2.0 * math.pi * self.p / self.n_robots

    @property
    def kappa(self):
        return math.gcd(self.n_robots, self.p)


@dataclass(frozen=True)
class RingTopology:
    """Cyclic communication order over robot ids (a permutation of 0..N-1)."""

    order: tuple

    def __post_init__(self):
        n = len(self.order)
        if n < 2:
            raise ValueError("ring needs at least 2 robots")
        if sorted(self.order) != list(range(n)):
            raise ValueError(f"order must be a permutation of 0..{n - 1}, got {self.order}")

    @property
    def n_robots(self):
        return len(self.order)

    def neighbors(self, robot):
        """The two cyclically adjacent robot ids (equal for N = 2)."""
        pos = self.order.index(robot)
        n = len(self.order)
        return (self.order[(pos - 1) % n], self.order[(pos + 1) % n])

    def edges(self):
        """Undirected ring edges in order, one per adjacent pair."""
        n = len(self.order)
        return [(self.order[k], self.order[(k + 1) % n]) for k in range(n)]


def ring_topology(n_robots):
    return RingTopology(order=tuple(range(n_robots)))


def kuramoto_rate(theta_i, neighbor_thetas, omega, coupling):
    """Phase rate omega - K * sum sin(theta_j - theta_i).

    neighbor_thetas is the robot's current estimate of its ring neighbors;
    an empty sequence degenerates to plain curve-following at omega.
    """
    arr = np.asarray(neighbor_thetas, dtype=float)
    if arr.size == 0:
        return float(omega)
    return float(omega - coupling * np.sin(arr - theta_i).sum())


def step(theta, rate, dt):
    """One explicit Euler step; phases are kept unwrapped (no modulo)."""
    return theta + rate * dt


def step_substepped(theta_i, neighbor_thetas, params):
    """Advance one robot by params.dt with frozen neighbor estimates.

    Splits the step so each substep satisfies the stability guard; with
    substeps = 1 this is exactly step(theta, kuramoto_rate(...), dt).
    """
    h = params.dt / params.substeps
    th = theta_i
    for _ in range(params.substeps):
        th = step(th, kuramoto_rate(th, neighbor_thetas, params.omega, params.coupling), h)
    return th


def equilibrium_phases(n_robots, p, theta0=0.0):
    """Splay phases theta0 + 2pi p i / N for i = 0..N-1 (unwrapped)."""
    i = np.arange(n_robots, dtype=float)
    return theta0 + 2.0 * math.pi * p * i / n_robots


def stable_p_set(n_robots):
    """Integers p with N/4 < p < 3N/4 (strictly): the stable splay patterns."""
    lo = n_robots / 4.0
    hi = 3.0 * n_robots / 4.0
    return tuple(p for p in range(1, n_robots) if lo < p < hi)


def cluster_count(n_robots, p):
    """Robots per phase slot at the (N, p) splay pattern: gcd(N, p)."""
    return math.gcd(n_robots, p)


def _circular_groups(thetas, tol):
    """Group phases mod 2pi with chained tolerance; returns group count."""
    wrapped = np.sort(np.mod(np.asarray(thetas, dtype=float), 2.0 * math.pi))
    n = wrapped.size
    if n == 0:
        raise ValueError("no phases given")
    if n == 1:
        return 1
    gaps = np.diff(wrapped, append=wrapped[0] + 2.0 * math.pi)
    breaks = int((gaps > tol).sum())
    near = ((gaps > 0.5 * tol) & (gaps < 2.0 * tol)).any()
    if near:
        warnings.warn("phase grouping is ambiguous: a gap is close to tol", stacklevel=3)
    return max(breaks, 1)


def phase_cluster_count(thetas, tol=1e-2):
    """Number of distinct phase slots occupied (mod 2pi, within tol)."""
    return _circular_groups(thetas, tol)


def phase_cluster_size(thetas, tol=1e-2):
    """Robots sharing each phase slot, assuming even occupancy.

    At a splay equilibrium this equals gcd(N, p). Uneven occupancy (not an
    equilibrium pattern) is reported with a warning and rounded down.
    """
    thetas = np.asarray(thetas, dtype=float)
    groups = _circular_groups(thetas, tol)
    if thetas.size % groups != 0:
        warnings.warn(
            f"{thetas.size} phases in {groups} slots do not divide evenly", stacklevel=2
        )
    return thetas.size // groups


def perturbation_safe(eq, robot, delta, topology):
    """True when a phase kick of delta on one robot cannot move the equilibrium.

    The pattern survives exactly when the perturbed phase still repels both
    ring neighbors: cos(theta_i - theta_j + delta) < 0 for each neighbor j.
    Robot ids are mapped to phases through their position in the ring order.
    """
    n = topology.n_robots
    if n != eq.n_robots:
        raise ValueError("topology size does not match equilibrium")
    phases = equilibrium_phases(eq.n_robots, eq.p, eq.theta0)
    pos = {rid: k for k, rid in enumerate(topology.order)}
    th = {rid: phases[pos[rid]] for rid in topology.order}
    for j in topology.neighbors(robot):
        if math.cos(th[robot] - th[j] + delta) >= 0:
            return False
    return True


def order_residual(thetas, topology):
    """Largest |sum_j sin(theta_i - theta_j)| over robots: 0 at any equilibrium."""
    thetas = np.asarray(thetas, dtype=float)
    worst = 0.0
    for i in topology.order:
        s = sum(math.sin(thetas[i] - thetas[j]) for j in topology.neighbors(i))
        worst = max(worst, abs(s))
    return worst
