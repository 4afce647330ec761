"""Mission sizing: sensing-radius, robot-count, timing and clearance bounds.

All bounds assume the planar amplitudes A, B and frequencies a, b of the
patrol curve, N robots in a splay pattern with kappa robots per phase slot,
and a sensing disc of radius r_s in the x-y plane.
"""

import math
from dataclasses import dataclass, field

from . import coordination, curve as curve_mod


@dataclass(frozen=True)
class MissionSpec:
    """Rectangle half-extents covered by the curve plus sensing parameters."""

    A: float
    B: float
    r_s: float
    eta: float = 1.0
    kappa: int = 1

    def __post_init__(self):
        if self.A <= 0 or self.B <= 0:
            raise ValueError("mission extents must be positive")
        if self.r_s <= 0:
            raise ValueError(f"sensing radius must be positive, got {self.r_s}")
        if self.eta < 1.0:
            raise ValueError(f"inflation factor eta must be >= 1, got {self.eta}")
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")


def min_radius_coverage(A, B, a, b):
    """Sensing radius that the sweep needs to exceed (strictly) to cover the
    whole rectangle: max(B sin(pi/2a), A sin(pi/2b))."""
    return max(B * math.sin(math.pi / (2 * a)), A * math.sin(math.pi / (2 * b)))


def min_radius_detection(A, B, n_robots, kappa=1):
    """Smallest radius (non-strict) so adjacent sweeping robots leave no gap
    for a target to slip through: sin(pi/(N/kappa)) * sqrt(A^2 + B^2)."""
    slots = n_robots / kappa
    return math.sin(math.pi / slots) * math.hypot(A, B)


def inflated_radius(base, eta):
    """Deployment radius eta * base covering model and tracking slack."""
    if eta < 1.0:
        raise ValueError(f"eta must be >= 1, got {eta}")
    return eta * base


def min_robots(A, B, r_s, kappa=1):
    """Smallest N with the detection radius bound within r_s.

    The detection inequality is non-strict, so a fleet sitting exactly on
    the bound qualifies; near-integer ratios are snapped before rounding
    up to keep the exact-boundary case from tipping over.
    """
    ratio = r_s / math.hypot(A, B)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"r_s must lie in (0, sqrt(A^2+B^2)], got ratio {ratio:.3g}")
    bound = math.pi * kappa / math.asin(ratio)
    nearest = round(bound)
    if abs(bound - nearest) < 1e-9:
        return nearest
    return math.ceil(bound)


def max_detection_time(omega, n_robots, kappa=1):
    """Revisit period of the sweep: (2pi/omega) / (N/kappa)."""
    if omega <= 0:
        raise ValueError(f"omega must be positive, got {omega}")
    return (2.0 * math.pi / omega) / (n_robots / kappa)


def max_encumbrance_2d(A, B, a, b, n_robots):
    """Strict robot-radius bound on the planar curve:
    sin(pi/N) * A * B / sqrt(A^2 a^2 + B^2 b^2)."""
    return math.sin(math.pi / n_robots) * A * B / math.hypot(A * a, B * b)


def max_encumbrance_3d(params, n_robots, samples=2**17):
    """Robot-radius bound on the spatial curve: half the minimum pairwise
    separation of the splay pattern, found numerically."""
    return 0.5 * curve_mod.min_pairwise_separation(params, n_robots, samples=samples)


def default_p(n_robots, kappa=1):
    """Smallest stable phase multiplier with the requested robots per slot."""
    candidates = [
        p for p in coordination.stable_p_set(n_robots) if math.gcd(n_robots, p) == kappa
    ]
    if not candidates:
        raise ValueError(
            f"no stable splay pattern with kappa={kappa} exists for N={n_robots}"
        )
    return candidates[0]


@dataclass(frozen=True)
class GuaranteeReport:
    """Outcome of checking a mission against every sizing bound."""

    coverage_ok: bool
    detection_ok: bool
    min_robots: int
    robot_count_ok: bool
    collision_bound: float
    t_max: float
    coverage_bound: float
    detection_bound: float
    violated: tuple = field(default_factory=tuple)

    @property
    def ok(self):
        return not self.violated


def check_guarantees(mission, params, omega, n_robots):
    """Evaluate all bounds for a mission on a given curve at sweep rate omega.

    Coverage is strict (r_s must exceed the bound), detection is non-strict
    against the eta-inflated bound. The collision bound is reported for the
    caller to check against the physical robot radius.
    """
    if mission.A != params.A or mission.B != params.B:
        raise ValueError("mission extents must match the curve amplitudes")
    cov = min_radius_coverage(params.A, params.B, params.a, params.b)
    det = inflated_radius(
        min_radius_detection(params.A, params.B, n_robots, mission.kappa), mission.eta
    )
    needed = min_robots(params.A, params.B, mission.r_s, mission.kappa)
    violated = []
    if not mission.r_s > cov:
        violated.append("coverage_radius")
    if not mission.r_s >= det:
        violated.append("detection_radius")
    if not n_robots >= needed:
        violated.append("robot_count")
    return GuaranteeReport(
        coverage_ok=mission.r_s > cov,
        detection_ok=mission.r_s >= det,
        min_robots=needed,
        robot_count_ok=n_robots >= needed,
        collision_bound=max_encumbrance_2d(params.A, params.B, params.a, params.b, n_robots),
        t_max=max_detection_time(omega, n_robots, mission.kappa),
        coverage_bound=cov,
        detection_bound=det,
        violated=tuple(violated),
    )


@dataclass(frozen=True)
class SpatialSearchResult:
    C: float
    c: int
    phi: float
    separation: float


def search_3d_params(params_2d, n_robots, c_candidates, c_range, phi_grid=None,
                     c_points=8, samples=2**14):
    """Pick the vertical extension (C, c, phi) maximizing robot separation.

    Exhaustively evaluates every candidate frequency c coprime with a and b
    against a grid of C values in c_range and phases in phi_grid, scoring
    each by the numeric minimum pairwise separation of the splay pattern.
    Ties break toward smaller (C, c, phi).
    """
    if phi_grid is None:
        phi_grid = (0.0, math.pi / 4, math.pi / 2)
    usable = [
        c
        for c in c_candidates
        if math.gcd(c, params_2d.a) == 1 and math.gcd(c, params_2d.b) == 1
    ]
    if not usable:
        gcds = {
            c: (math.gcd(c, params_2d.a), math.gcd(c, params_2d.b)) for c in c_candidates
        }
        raise ValueError(
            f"no candidate c is coprime with a={params_2d.a}, b={params_2d.b}; "
            f"gcds: {gcds}"
        )
    lo, hi = c_range
    if not (0 < lo <= hi):
        raise ValueError(f"C range must be positive and ordered, got {c_range}")
    c_values = [lo + (hi - lo) * k / (c_points - 1) for k in range(c_points)] \
        if c_points > 1 else [lo]
    best = None
    for C in c_values:
        for c in usable:
            for phi in phi_grid:
                cand = curve_mod.LissajousParams(
                    A=params_2d.A, B=params_2d.B, C=C, a=params_2d.a, b=params_2d.b,
                    c=c, phi=phi,
                )
                sep = curve_mod.min_pairwise_separation(cand, n_robots, samples=samples)
                key = (-sep, C, c, phi)
                if best is None or key < best[0]:
                    best = (key, SpatialSearchResult(C=C, c=c, phi=phi, separation=sep))
    return best[1]
