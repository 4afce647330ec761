"""Closed 3D Lissajous paths: evaluation, validity checks, projection, spacing.

The patrol path is x = A cos(a g), y = B sin(b g), z = C cos(c g + phi) for
g in [0, 2pi). With a odd and gcd(a, b) = 1 the planar projection is traced
once per period without retracing itself; with C > 0 and a, b, c pairwise
coprime the spatial curve has no self-intersections at all, so robots that
stay phase-separated on it can never collide.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class LissajousParams:
    """Parameters of a closed Lissajous path.

    C = 0 gives the planar curve (z is identically zero and c, phi have no
    effect). Frequency validity (a odd, coprimality) is enforced at
    construction unless allow_degenerate is set, which exists so that
    analysis helpers can be exercised on curves such as a plain circle.
    """

    A: float
    B: float
    C: float = 0.0
    a: int = 1
    b: int = 2
    c: int = 1
    phi: float = 0.0
    allow_degenerate: bool = False

    def __post_init__(self):
        if not (self.A > 0 and self.B > 0):
            raise ValueError(f"amplitudes must be positive, got A={self.A}, B={self.B}")
        if self.C < 0:
            raise ValueError(f"C must be non-negative, got C={self.C}")
        for name in ("a", "b", "c"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.allow_degenerate:
            return
        if self.a % 2 == 0:
            raise ValueError(f"a must be odd for a non-retracing path, got a={self.a}")
        if math.gcd(self.a, self.b) != 1:
            raise ValueError(
                f"a and b must be coprime, got gcd({self.a}, {self.b}) = "
                f"{math.gcd(self.a, self.b)}"
            )
        if self.C > 0:
            if math.gcd(self.a, self.c) != 1 or math.gcd(self.b, self.c) != 1:
                raise ValueError(
                    "a, b, c must be pairwise coprime for a self-avoiding "
                    f"spatial path, got (a, b, c) = ({self.a}, {self.b}, {self.c})"
                )

    def point(self, gamma):
        """Position on the curve at parameter gamma (scalar or array)."""
        g = np.asarray(gamma, dtype=float)
        x = self.A * np.cos(self.a * g)
        y = self.B * np.sin(self.b * g)
        z = self.C * np.cos(self.c * g + self.phi)
        return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)

    def velocity(self, gamma, rate):
        """Cartesian velocity when the parameter advances at d(gamma)/dt = rate."""
        g = np.asarray(gamma, dtype=float)
        r = np.asarray(rate, dtype=float)
        vx = -self.A * self.a * np.sin(self.a * g) * r
        vy = self.B * self.b * np.cos(self.b * g) * r
        vz = -self.C * self.c * np.sin(self.c * g + self.phi) * r
        return np.stack([vx, vy, np.broadcast_to(vz, vx.shape)], axis=-1)

    @property
    def scale(self):
        return max(self.A, self.B) + self.C


@dataclass(frozen=True)
class CurveDiagnostics:
    """Validity report for a parameter set.

    nondegenerate: the x-y projection is traced once per period.
    knot: the spatial curve additionally has no self-intersections.
    min_self_distance: smallest distance between points of the curve whose
    parameters are not adjacent (grid-scanned, then locally refined).
    violating_pairs: parameter pairs (g1, g2) found at near-zero distance.
    """

    nondegenerate: bool
    knot: bool
    min_self_distance: float
    violating_pairs: tuple = field(default_factory=tuple)


def _pair_distance_sq(curve, g):
    p = curve.point(g[0]) - curve.point(g[1])
    return float(p @ p)


def _pair_distance_grad(curve, g):
    d = curve.point(g[0]) - curve.point(g[1])
    t0 = curve.velocity(g[0], 1.0)
    t1 = curve.velocity(g[1], 1.0)
    return np.array([2.0 * d @ t0, -2.0 * d @ t1])


def _refine_pair(curve, g1, g2, halfwidth):
    res = optimize.minimize(
        lambda g: _pair_distance_sq(curve, g),
        x0=np.array([g1, g2]),
        jac=lambda g: _pair_distance_grad(curve, g),
        method="L-BFGS-B",
        bounds=[(g1 - halfwidth, g1 + halfwidth), (g2 - halfwidth, g2 + halfwidth)],
    )
    return res.x, math.sqrt(max(res.fun, 0.0))


def _max_speed(curve):
    return math.sqrt(
        (curve.A * curve.a) ** 2 + (curve.B * curve.b) ** 2 + (curve.C * curve.c) ** 2
    )


def _circular_gap(a, b):
    d = np.abs(a - b) % TWO_PI
    return np.minimum(d, TWO_PI - d)


def self_distance_scan(curve, samples=2**14, exclusion=0.05, refine=True):
    """Minimum distance between curve points at least `exclusion` apart in
    parameter (radians).

    The exclusion window is what makes the quantity meaningful: without it
    the infimum over distinct points of any smooth curve is zero. A strided
    all-pairs pass yields an upper bound on the minimum; every grid pair
    within that bound (padded by the largest possible within-cell variation)
    is then collected through a KD-tree, and the best candidates are refined
    by bounded local minimization whose windows are kept narrower than the
    exclusion so a pair can never collapse onto itself.

    Returns (min_distance, pairs) where pairs holds the refined (g1, g2)
    parameter locations at or near the minimum. A self-intersecting curve
    refines to ~0; a self-avoiding one stays strictly positive.
    """
    from scipy.spatial import cKDTree

    g = np.linspace(0.0, TWO_PI, samples, endpoint=False)
    pts = curve.point(g)
    step = TWO_PI / samples
    excl_steps = max(2, int(math.ceil(exclusion / step)))
    speed = _max_speed(curve)

    stride = max(1, samples // 8192)
    sub = pts[::stride]
    n_sub = len(sub)
    w_sub = max(1, excl_steps // stride)
    best_sub = np.inf
    for j in range(w_sub, n_sub - w_sub + 1):
        d = sub - np.roll(sub, -j, axis=0)
        best_sub = min(best_sub, float(np.einsum("ij,ij->i", d, d).min()))
    radius = math.sqrt(best_sub) + speed * step * (stride + 1)

    tree = cKDTree(pts)
    pair_idx = tree.query_pairs(radius, output_type="ndarray")
    if len(pair_idx):
        gap = np.abs(pair_idx[:, 0] - pair_idx[:, 1])
        gap = np.minimum(gap, samples - gap)
        pair_idx = pair_idx[gap >= excl_steps]
    if len(pair_idx) == 0:
        return math.sqrt(best_sub), ()
    d = pts[pair_idx[:, 0]] - pts[pair_idx[:, 1]]
    dist_sq = np.einsum("ij,ij->i", d, d)
    order = np.argsort(dist_sq)
    cutoff = dist_sq[order[0]] + (2.0 * speed * step) ** 2
    candidates = [i for i in order[:128] if dist_sq[i] <= cutoff]
    if not refine:
        i = candidates[0]
        return math.sqrt(dist_sq[i]), ((g[pair_idx[i, 0]], g[pair_idx[i, 1]]),)
    halfwidth = min(2.0 * step, 0.25 * exclusion)
    refined = []
    for i in candidates:
        g1, g2 = g[pair_idx[i, 0]], g[pair_idx[i, 1]]
        x, dist = _refine_pair(curve, g1, g2, halfwidth)
        if _circular_gap(x[0], x[1]) < 0.5 * exclusion:
            continue
        refined.append((dist, float(x[0] % TWO_PI), float(x[1] % TWO_PI)))
    if not refined:
        i = candidates[0]
        return math.sqrt(dist_sq[i]), ((g[pair_idx[i, 0]], g[pair_idx[i, 1]]),)
    refined.sort()
    dmin = refined[0][0]
    seen, pairs = [], []
    for dist, g1, g2 in refined:
        if dist > dmin * 1.5 + 1e-9:
            break
        if any(abs(g1 - s1) < 1e-3 and abs(g2 - s2) < 1e-3 for s1, s2 in seen):
            continue
        seen.append((g1, g2))
        pairs.append((g1, g2))
    return dmin, tuple(pairs)


def validate(curve, samples=2**14):
    """Check frequency validity and scan for self-intersections.

    nondegenerate comes from arithmetic alone (a odd, gcd(a, b) = 1). The
    knot verdict needs pairwise coprime frequencies AND a clear numeric
    scan: coprimality is necessary but certain symmetric z phases still
    produce isolated crossings (for instance phi = 0 always does, since
    x and z are then even in gamma while y vanishes at its axis crossings),
    so the verdict is confirmed against the refined minimum self-distance.
    """
    nondegenerate = (curve.a % 2 == 1) and math.gcd(curve.a, curve.b) == 1
    coprime_3d = (
        nondegenerate
        and curve.C > 0
        and math.gcd(curve.a, curve.c) == 1
        and math.gcd(curve.b, curve.c) == 1
    )
    dmin, pairs = self_distance_scan(curve, samples=samples)
    tol = 1e-6 * curve.scale
    violating = pairs if dmin < tol else ()
    return CurveDiagnostics(
        nondegenerate=nondegenerate,
        knot=coprime_3d and dmin >= tol,
        min_self_distance=dmin,
        violating_pairs=violating,
    )


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_min(f, lo, hi, iters=80):
    """Vectorized golden-section minimization of f on [lo, hi] (arrays)."""
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    c = hi - _INVPHI * (hi - lo)
    d = lo + _INVPHI * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        shrink_hi = fc < fd
        hi = np.where(shrink_hi, d, hi)
        lo = np.where(shrink_hi, lo, c)
        c = hi - _INVPHI * (hi - lo)
        d = lo + _INVPHI * (hi - lo)
        fc, fd = f(c), f(d)
    mid = 0.5 * (lo + hi)
    return mid, f(mid)


def project_many(curve, points, hints, window=math.pi / 2, coarse=192,
                 iters=80):
    """Parameter of the nearest curve point for each row of points.

    Searches [hint - window, hint + window] per row: a coarse grid pass
    picks the best bracket (ties broken toward the hint) and golden-section
    iterations refine it. Returns unwrapped parameters near the hints.
    """
    points = np.asarray(points, dtype=float)
    hints = np.asarray(hints, dtype=float)
    offsets = np.linspace(-window, window, coarse)
    gammas = hints[:, None] + offsets[None, :]
    diff = curve.point(gammas) - points[:, None, :]
    dist_sq = np.einsum("rgi,rgi->rg", diff, diff)
    min_val = dist_sq.min(axis=1, keepdims=True)
    tied = dist_sq <= min_val + 1e-12 * curve.scale**2
    tie_cost = np.where(tied, np.abs(offsets)[None, :], np.inf)
    idx = np.argmin(tie_cost, axis=1)
    step = offsets[1] - offsets[0]
    center = gammas[np.arange(len(hints)), idx]

    def dist_at(g):
        d = curve.point(g) - points
        return np.einsum("ri,ri->r", d, d)

    refined, _ = _golden_min(dist_at, center - step, center + step,
                             iters=iters)
    return refined


def project(curve, point, hint, window=math.pi / 2):
    """Scalar wrapper around project_many."""
    out = project_many(curve, np.asarray(point, float)[None, :], np.array([hint]), window)
    return float(out[0])


def min_pairwise_separation(curve, n_robots, samples=2**17, refine=True):
    """Smallest distance between any two of n_robots equally phase-spaced robots.

    Phases are theta_i = g + 2pi i / n_robots; as g sweeps a full period each
    unordered pair realizes the pair distance at a fixed parameter offset, so
    the scan reduces to the offsets 2pi k / n_robots for k = 1..n_robots//2.
    """
    if n_robots < 2:
        raise ValueError("need at least two robots")
    g = np.linspace(0.0, TWO_PI, samples, endpoint=False)
    pts = curve.point(g)
    overall = math.inf
    for k in range(1, n_robots // 2 + 1):
        delta = TWO_PI * k / n_robots
        d = pts - curve.point(g + delta)
        dist_sq = np.einsum("ij,ij->i", d, d)
        i = int(np.argmin(dist_sq))
        dmin = math.sqrt(dist_sq[i])
        if refine:
            step = TWO_PI / samples

            def pair_dist(gg, off=delta):
                dd = curve.point(gg) - curve.point(gg + off)
                return np.einsum("ri,ri->r", dd, dd)

            _, val = _golden_min(pair_dist, np.array([g[i] - step]), np.array([g[i] + step]))
            dmin = min(dmin, math.sqrt(float(val[0])))
        overall = min(overall, dmin)
    return overall


def ellipse_residual(curve, thetas, gamma):
    """How far the fleet is from lying on a single common sweep ellipse.

    At a one-cluster equilibrium with a + b equal to the number of distinct
    phase slots, the quantity (a + b) * theta_i agrees modulo 2pi across the
    fleet, and the robots (advanced by any common offset gamma) sit on one
    ellipse, namely
        y^2/B^2 + x^2/A^2 - 2 x y sin((a+b)s)/(A B) = cos^2((a+b)s)
    with s referenced to the first robot. The returned value is the largest
    absolute residual of that equation over the fleet; it is ~0 exactly when
    the phase pattern has the equilibrium structure.
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.size == 0:
        raise ValueError("thetas must be non-empty")
    swept = thetas + gamma
    x = curve.A * np.cos(curve.a * swept)
    y = curve.B * np.sin(curve.b * swept)
    s = (curve.a + curve.b) * (thetas[0] + gamma)
    res = (
        y**2 / curve.B**2
        + x**2 / curve.A**2
        - 2.0 * x * y * math.sin(s) / (curve.A * curve.B)
        - math.cos(s) ** 2
    )
    return float(np.max(np.abs(res)))
