"""Tests for the patrol-curve geometry module.

Expected values marked "oracle" were computed with an independent dense-grid
script (2e6 samples plus parabolic refinement) and frozen here.
"""

import math

import numpy as np
import pytest

from ringsweep.curve import (
    LissajousParams,
    ellipse_residual,
    min_pairwise_separation,
    project,
    project_many,
    self_distance_scan,
    validate,
)

PI = math.pi

EXP1 = LissajousParams(A=20, B=20, C=2, a=3, b=4, c=5, phi=PI / 2)
EXP2 = LissajousParams(A=20, B=20, C=3, a=5, b=6, c=7, phi=PI / 2)


def test_point_special_angles():
    # gamma = 0: x = A, y = 0, z = C cos(phi)
    p0 = EXP1.point(0.0)
    np.testing.assert_allclose(p0, [20.0, 0.0, 0.0], atol=1e-12)
    # gamma = pi: cos(3 pi) = -1, sin(4 pi) = 0, cos(5 pi + pi/2) = 0
    np.testing.assert_allclose(EXP1.point(PI), [-20.0, 0.0, 0.0], atol=1e-12)
    flat = LissajousParams(A=3, B=7, a=1, b=2)
    np.testing.assert_allclose(flat.point(PI / 2), [0.0, 0.0, 0.0], atol=1e-12)


def test_point_vectorized_shape():
    g = np.linspace(0, 2 * PI, 50)
    pts = EXP1.point(g)
    assert pts.shape == (50, 3)
    np.testing.assert_allclose(pts[0], EXP1.point(g[0]))


def test_velocity_matches_finite_difference():
    g = np.array([0.31, 1.7, 4.2, 5.9])
    h = 1e-6
    num = (EXP1.point(g + h) - EXP1.point(g - h)) / (2 * h)
    np.testing.assert_allclose(EXP1.velocity(g, 1.0), num, atol=1e-6)
    # the parameter rate scales velocity linearly
    np.testing.assert_allclose(EXP1.velocity(g, 0.25), 0.25 * EXP1.velocity(g, 1.0))


def test_params_validation():
    with pytest.raises(ValueError):
        LissajousParams(A=-1, B=1, a=1, b=2)
    with pytest.raises(ValueError):
        LissajousParams(A=1, B=1, a=2, b=3)  # a must be odd
    with pytest.raises(ValueError):
        LissajousParams(A=1, B=1, a=3, b=6)  # gcd(a, b) > 1
    with pytest.raises(ValueError):
        LissajousParams(A=1, B=1, C=1, a=3, b=4, c=6)  # gcd(b, c) > 1
    # the escape hatch admits the same frequencies for diagnostics
    LissajousParams(A=1, B=1, C=1, a=3, b=4, c=6, allow_degenerate=True)


def test_validate_knot_cases():
    diag = validate(EXP1)
    assert diag.nondegenerate
    assert diag.knot
    assert diag.min_self_distance == pytest.approx(1.070610417898809, rel=1e-2)
    assert diag.violating_pairs == ()


def test_validate_symmetric_phase_intersects():
    # pairwise coprime frequencies are not enough: phi = 0 makes x and z
    # even in gamma while y vanishes at its axis crossings, so the curve
    # meets itself exactly even though (3, 4, 5) are pairwise coprime.
    cur = LissajousParams(A=20, B=20, C=2, a=3, b=4, c=5, phi=0.0)
    diag = validate(cur)
    assert diag.nondegenerate
    assert not diag.knot
    assert diag.min_self_distance < 1e-9
    assert len(diag.violating_pairs) >= 1
    g1, g2 = diag.violating_pairs[0]
    np.testing.assert_allclose(cur.point(g1), cur.point(g2), atol=1e-7)


def test_validate_planar_curve_not_knot():
    diag = validate(LissajousParams(A=20, B=20, a=3, b=4))
    assert diag.nondegenerate
    assert not diag.knot  # planar figures always cross themselves
    assert diag.min_self_distance < 1e-9


def test_validate_shared_factor_intersects():
    cur = LissajousParams(
        A=20, B=20, C=2, a=3, b=4, c=6, phi=0.9, allow_degenerate=True
    )
    diag = validate(cur)
    assert not diag.knot
    assert diag.min_self_distance < 1e-9


def test_validate_even_a_retraces():
    cur = LissajousParams(A=20, B=20, a=2, b=3, allow_degenerate=True)
    diag = validate(cur)
    assert not diag.nondegenerate
    assert diag.min_self_distance == pytest.approx(0.0, abs=1e-12)


def test_self_distance_scan_grid_convergence():
    d_lo, _ = self_distance_scan(EXP2, samples=2**13)
    d_hi, _ = self_distance_scan(EXP2, samples=2**15)
    assert d_lo == pytest.approx(d_hi, rel=0.02)
    assert d_hi == pytest.approx(0.9069284476697057, rel=1e-3)


def test_project_oracle():
    q = EXP1.point(1.2345) + np.array([0.4, -0.3, 0.2])
    g = project(EXP1, q, hint=1.2)
    assert g == pytest.approx(1.238046602027783, abs=1e-6)  # oracle
    dist = np.linalg.norm(EXP1.point(g) - q)
    # oracle has grid-limited precision; the refined result may only improve it
    assert dist == pytest.approx(0.5200978004855193, abs=1e-7)
    assert dist <= 0.5200978004855193 + 1e-12


def test_project_is_local_minimum():
    q = EXP2.point(2.0) + np.array([-0.2, 0.1, 0.05])
    g = project(EXP2, q, hint=2.1)
    d0 = np.linalg.norm(EXP2.point(g) - q)
    for eps in (1e-4, -1e-4, 1e-3, -1e-3):
        assert np.linalg.norm(EXP2.point(g + eps) - q) >= d0 - 1e-12


def test_project_prefers_hint_side():
    # a point near the curve projects back to its own parameter, not to a
    # spatially close branch from another part of the sweep
    g_true = 0.9
    q = EXP1.point(g_true)
    g = project(EXP1, q, hint=g_true + 0.05)
    assert abs(g - g_true) < 1e-6


def test_project_many_matches_scalar():
    gs = np.array([0.1, 1.3, 2.9, 4.4, 6.1])
    qs = EXP1.point(gs) + 0.01
    hits = project_many(EXP1, qs, hints=gs)
    for q, hint, got in zip(qs, gs, hits):
        assert got == pytest.approx(project(EXP1, q, hint=hint), abs=1e-9)


def test_min_pairwise_separation_circle():
    circle = LissajousParams(A=5, B=5, a=1, b=1)
    # N robots evenly spread on a circle of radius R sit 2 R sin(pi/N) apart
    assert min_pairwise_separation(circle, 2) == pytest.approx(10.0, rel=1e-9)
    assert min_pairwise_separation(circle, 4) == pytest.approx(
        5 * math.sqrt(2), rel=1e-9
    )


def test_min_pairwise_separation_frozen_values():
    assert min_pairwise_separation(EXP1, 7) == pytest.approx(
        6.24545154887784, rel=1e-4
    )
    flat = LissajousParams(A=20, B=20, a=3, b=4)
    d_flat = min_pairwise_separation(flat, 7)
    assert d_flat == pytest.approx(5.403907157110946, rel=1e-4)
    # lifting the curve out of plane strictly increases fleet clearance
    assert min_pairwise_separation(EXP1, 7) > d_flat


def test_ellipse_residual_zero_at_equilibrium():
    n, p = 7, 2
    th = 0.3 + 2 * PI * p * np.arange(n) / n
    res = ellipse_residual(EXP1, th, 0.77)
    np.testing.assert_allclose(res, 0.0, atol=1e-9)


def test_ellipse_residual_detects_disorder():
    n, p = 7, 2
    rng = np.random.default_rng(7)
    th = 0.3 + 2 * PI * p * np.arange(n) / n + 0.1 * rng.standard_normal(n)
    res = np.max(np.abs(ellipse_residual(EXP1, th, 0.77)))
    assert res > 1e-3
    assert res == pytest.approx(0.6368686827903307, rel=1e-6)
