"""Tests for geoverity.services.geometry."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geoverity.enums import CircleRule, EpsilonMode
from geoverity.services.geometry import (
    Degenerate,
    DegenerateTriangleError,
    GeometryError,
    GeoPoint,
    InvalidIterationError,
    NegativeSideError,
    TriangleSpec,
    barycentric,
    circle_contains,
    cpv_condition,
    epsilon_area,
    geo_triangle_contains,
    great_circle_km,
    heron_area,
    side_clearance,
)
from geoverity.services.mp import OwdEstimate

HALF_EARTH_KM = math.pi * 6371.0

sides = st.floats(min_value=0.0, max_value=1e4, allow_nan=False)


def _dist(p, q):
    return math.hypot(p[0] - q[0], p[1] - q[1])


def _exact_estimate(p, tri):
    a, b, c = tri
    return OwdEstimate(_dist(p, a), _dist(p, b), _dist(p, c))


def _exact_baseline(tri):
    a, b, c = tri
    return (_dist(a, b), _dist(b, c), _dist(a, c))


# ─── great_circle_km ──────────────────────────────────────────────────────────


def test_great_circle_identity():
    assert great_circle_km(GeoPoint(0, 0), GeoPoint(0, 0)) == 0.0


def test_great_circle_half_circumference():
    assert great_circle_km(GeoPoint(0, 0), GeoPoint(0, 180)) == pytest.approx(HALF_EARTH_KM, rel=1e-9)


def test_great_circle_poles():
    assert great_circle_km(GeoPoint(90, 0), GeoPoint(-90, 0)) == pytest.approx(HALF_EARTH_KM, rel=1e-9)


def test_great_circle_symmetric():
    p, q = GeoPoint(40.7, -74.0), GeoPoint(34.05, -118.25)
    assert great_circle_km(p, q) == great_circle_km(q, p)
    assert 3900 < great_circle_km(p, q) < 4000


def test_geopoint_bounds():
    with pytest.raises(GeometryError):
        GeoPoint(91, 0)
    with pytest.raises(GeometryError):
        GeoPoint(0, 181)
    assert GeoPoint(0, -180).lon == 180.0


def test_triangle_spec_rejects_collinear_vertices():
    with pytest.raises(DegenerateTriangleError):
        TriangleSpec(vertices=(GeoPoint(0, 0), GeoPoint(0, 1), GeoPoint(0, 2)), baseline=(1.0, 1.0, 2.0))


def test_triangle_spec_rejects_non_positive_baseline():
    with pytest.raises(GeometryError):
        TriangleSpec(vertices=(GeoPoint(0, 0), GeoPoint(0, 1), GeoPoint(1, 0)), baseline=(1.0, 0.0, 1.0))


# ─── heron_area ───────────────────────────────────────────────────────────────


def test_heron_right_triangle():
    assert heron_area(3, 4, 5) == pytest.approx(6.0)


def test_heron_collinear_is_zero():
    assert heron_area(1, 1, 2) == 0.0


def test_heron_triangle_inequality_violated():
    result = heron_area(1, 1, 5)
    assert isinstance(result, Degenerate)
    assert result.longest == 2
    assert result.excess == pytest.approx(3.0)


def test_heron_isosceles():
    assert heron_area(5, 5, 6) == pytest.approx(12.0)


def test_heron_negative_side():
    with pytest.raises(NegativeSideError):
        heron_area(-1, 2, 2)


@given(sides, sides, sides)
def test_heron_symmetric(s1, s2, s3):
    values = [heron_area(*perm) for perm in ((s1, s2, s3), (s2, s3, s1), (s3, s1, s2), (s2, s1, s3))]
    if isinstance(values[0], Degenerate):
        assert all(isinstance(v, Degenerate) for v in values)
    else:
        assert all(v == pytest.approx(values[0], rel=1e-9, abs=1e-9) for v in values)


@given(
    st.floats(min_value=1.0, max_value=100.0),
    st.floats(min_value=1.0, max_value=100.0),
    st.floats(min_value=0.1, max_value=10.0),
)
def test_heron_scales_quadratically(s1, s2, k):
    s3 = max(s1, s2)
    base = heron_area(s1, s2, s3)
    scaled = heron_area(k * s1, k * s2, k * s3)
    assert scaled == pytest.approx(k * k * base, rel=1e-6)


def test_heron_zero_side():
    assert heron_area(7, 7, 0) == 0.0


# ─── cpv_condition ────────────────────────────────────────────────────────────


EQUILATERAL = (10.0, 10.0, 10.0)


def test_cpv_centroid_of_equilateral_passes():
    r = 10.0 / math.sqrt(3.0)
    assert cpv_condition(OwdEstimate(r, r, r), EQUILATERAL, 0.0)


def test_cpv_far_outside_fails():
    assert not cpv_condition(OwdEstimate(20.0, 20.0, 20.0), EQUILATERAL, 0.0)


def test_cpv_looser_epsilon_still_passes():
    assert cpv_condition(OwdEstimate(5.7735, 5.7735, 5.7735), EQUILATERAL, 10.0)


def test_cpv_invalid_estimate_raises():
    with pytest.raises(InvalidIterationError):
        cpv_condition(OwdEstimate(-1.0, 5.0, 5.0, valid=False), EQUILATERAL, 0.0)


def test_cpv_client_delays_shorter_than_baseline_side_is_invalid():
    # a + b = 4 < x = 10
    with pytest.raises(InvalidIterationError):
        cpv_condition(OwdEstimate(2.0, 2.0, 9.0), EQUILATERAL, 0.0)


def test_epsilon_area_modes():
    assert epsilon_area(EQUILATERAL, 0.0) == 0.0
    assert epsilon_area(EQUILATERAL, 4.0, mode=EpsilonMode.RAW_AREA) == 4.0
    # equilateral side 12 minus side 10
    expected = math.sqrt(3) / 4 * (12.0**2 - 10.0**2)
    assert epsilon_area(EQUILATERAL, 4.0) == pytest.approx(expected)


def test_epsilon_area_rejects_negative():
    with pytest.raises(GeometryError):
        epsilon_area(EQUILATERAL, -1.0)


@given(
    st.floats(min_value=0.5, max_value=30.0),
    st.floats(min_value=0.5, max_value=30.0),
    st.floats(min_value=0.5, max_value=30.0),
    st.floats(min_value=0.0, max_value=20.0),
    st.floats(min_value=0.0, max_value=20.0),
)
def test_cpv_monotone_in_epsilon(a, b, c, eps1, extra):
    est = OwdEstimate(a, b, c)
    try:
        passed = cpv_condition(est, EQUILATERAL, eps1)
    except InvalidIterationError:
        return
    if passed:
        assert cpv_condition(est, EQUILATERAL, eps1 + extra)


def test_cpv_noiseless_agrees_with_barycentric_oracle():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 1000:
        tri = tuple(tuple(v) for v in rng.uniform(0.0, 100.0, size=(3, 2)))
        a, b, c = tri
        # skip slivers where float area noise dominates
        outer = heron_area(*_exact_baseline(tri))
        if isinstance(outer, Degenerate) or outer < 50.0:
            continue
        p = tuple(rng.uniform(-50.0, 150.0, size=2))
        weights = barycentric(p, a, b, c)
        if min(abs(w) for w in weights) < 1e-3:
            continue
        inside = bool(min(weights) > 0.0)
        est = _exact_estimate(p, tri)
        assert cpv_condition(est, _exact_baseline(tri), 0.0) is inside
        checked += 1


# ─── circle_contains ──────────────────────────────────────────────────────────


def test_circle_boundary():
    assert circle_contains(3, 4, 5, 0)


def test_circle_outside():
    assert not circle_contains(4, 4, 5, 0)


def test_circle_near_midpoint():
    assert circle_contains(1, 1, 5, 0)


def test_circle_sum_rule():
    assert circle_contains(3, 4, 5, 0, rule=CircleRule.SUM)
    assert not circle_contains(4, 4, 5, 0, rule=CircleRule.SUM)


def test_circle_epsilon_widens_diameter():
    # 32 > 25, but (5 + 1)^2 = 36
    assert circle_contains(4, 4, 5, 1.0)


def test_circle_agrees_with_euclidean_oracle():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 1000:
        v1, v2, s = rng.uniform(-100.0, 100.0, size=(3, 2))
        d1, d2, d12 = _dist(s, v1), _dist(s, v2), _dist(v1, v2)
        centre = (v1 + v2) / 2.0
        radial = _dist(s, centre) - d12 / 2.0
        if abs(radial) < 1e-6 or d12 < 1.0:
            continue
        assert circle_contains(d1, d2, d12, 0.0) is bool(radial < 0.0)
        checked += 1


# ─── geographic containment ───────────────────────────────────────────────────


def test_geo_triangle_contains_centroid():
    vertices = (GeoPoint(40.0, -100.0), GeoPoint(42.0, -98.0), GeoPoint(40.0, -96.0))
    assert geo_triangle_contains(vertices, GeoPoint(40.7, -98.0))
    assert not geo_triangle_contains(vertices, GeoPoint(45.0, -98.0))


def test_side_clearance_of_equilateral_centroid():
    tri = ((0.0, 0.0), (1.0, 0.0), (0.5, math.sqrt(3.0) / 2.0))
    centre = (0.5, math.sqrt(3.0) / 6.0)
    assert side_clearance(centre, tri) == pytest.approx(math.sqrt(3.0) / 6.0)
