"""geometry.py — geographic primitives and delay-space area tests.

Delay-space triangles are abstract: their sides are one-way delays in ms and
their areas are in ms². Geographic helpers (great-circle distance, a local
equirectangular projection and barycentric containment) serve triangle
selection, the simulator and the test oracles.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from geoverity.enums import CircleRule, DistanceMetric, EpsilonMode
from geoverity.services.config import AREA_TOLERANCE_MS2, EARTH_RADIUS_KM

if TYPE_CHECKING:
    from geoverity.services.mp import OwdEstimate

logger = logging.getLogger(__name__)

PlanePoint = tuple[float, float]
Baseline = tuple[float, float, float]

# relative slack for a triangle inequality that fails only by float rounding
_SIDE_RELATIVE_TOLERANCE = 1e-12


class GeometryError(ValueError):
    pass


class NegativeSideError(GeometryError):
    pass


class DegenerateTriangleError(GeometryError):
    pass


class InvalidIterationError(GeometryError):
    """The measurement cannot be judged; the iteration is excluded from the vote."""


class DegenerateBaselineError(InvalidIterationError):
    pass


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise GeometryError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise GeometryError(f"longitude out of range: {self.lon}")
        if self.lon == -180.0:
            object.__setattr__(self, "lon", 180.0)


@dataclass(frozen=True, slots=True)
class Degenerate:
    """Side lengths that violate the triangle inequality.

    ``longest`` is the index (0..2, argument order) of the side that is too long.
    """

    longest: int
    excess: float


@dataclass(frozen=True, slots=True)
class TriangleSpec:
    vertices: tuple[GeoPoint, GeoPoint, GeoPoint]
    # x = AB, y = BC, z = AC
    baseline: Baseline
    verifier_ids: tuple[str, str, str] = ("A", "B", "C")
    triangle_id: str = ""
    measured_at_ms: float | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if len(self.vertices) != 3 or len(self.baseline) != 3:
            raise GeometryError("a triangle needs three vertices and three baselines")
        if any(not value > 0 for value in self.baseline):
            raise GeometryError(f"baseline delays must be positive: {self.baseline}")
        if len(set(self.verifier_ids)) != 3:
            raise GeometryError(f"verifier ids must be distinct: {self.verifier_ids}")
        if geo_triangle_area_km2(self.vertices) <= 0.0:
            raise DegenerateTriangleError(
                f"collinear verifier positions for triangle {self.triangle_id!r}"
            )


# ─── Geographic helpers ───────────────────────────────────────────────────────


def great_circle_km(p: GeoPoint, q: GeoPoint) -> float:
    """Haversine distance on a sphere of radius 6371 km."""
    lat1 = math.radians(p.lat)
    lat2 = math.radians(q.lat)
    dlat = lat2 - lat1
    dlon = math.radians(q.lon - p.lon)
    a = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    a = min(1.0, max(0.0, a))
    return EARTH_RADIUS_KM * 2.0 * math.atan2(math.sqrt(a), math.sqrt(1.0 - a))


def _wrap_lon_delta(delta: float) -> float:
    while delta > 180.0:
        delta -= 360.0
    while delta <= -180.0:
        delta += 360.0
    return delta


def project_km(p: GeoPoint, origin: GeoPoint) -> PlanePoint:
    """Local equirectangular projection around ``origin`` (x east, y north)."""
    x = math.radians(_wrap_lon_delta(p.lon - origin.lon)) * math.cos(math.radians(origin.lat))
    y = math.radians(p.lat - origin.lat)
    return EARTH_RADIUS_KM * x, EARTH_RADIUS_KM * y


def unproject_km(xy: PlanePoint, origin: GeoPoint) -> GeoPoint:
    x, y = xy
    lat = origin.lat + math.degrees(y / EARTH_RADIUS_KM)
    lon = origin.lon + math.degrees(x / (EARTH_RADIUS_KM * math.cos(math.radians(origin.lat))))
    return GeoPoint(lat=lat, lon=_wrap_lon_delta(lon))


def centroid(points: tuple[GeoPoint, ...] | list[GeoPoint]) -> GeoPoint:
    lat = sum(p.lat for p in points) / len(points)
    lon = sum(p.lon for p in points) / len(points)
    return GeoPoint(lat=lat, lon=lon)


def distance_km(
    p: GeoPoint,
    q: GeoPoint,
    *,
    metric: DistanceMetric = DistanceMetric.GREAT_CIRCLE,
    origin: GeoPoint | None = None,
) -> float:
    if metric is DistanceMetric.GREAT_CIRCLE:
        return great_circle_km(p, q)
    if origin is None:
        raise GeometryError("planar distances need a projection origin")
    px, py = project_km(p, origin)
    qx, qy = project_km(q, origin)
    return math.hypot(px - qx, py - qy)


def plane_area(a: PlanePoint, b: PlanePoint, c: PlanePoint) -> float:
    return abs((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])) / 2.0


def barycentric(p: PlanePoint, a: PlanePoint, b: PlanePoint, c: PlanePoint) -> tuple[float, float, float]:
    det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
    if det == 0.0:
        raise DegenerateTriangleError("collinear triangle has no barycentric frame")
    l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det
    l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det
    return l1, l2, 1.0 - l1 - l2


def point_in_plane_triangle(p: PlanePoint, a: PlanePoint, b: PlanePoint, c: PlanePoint) -> bool:
    return all(weight >= 0.0 for weight in barycentric(p, a, b, c))


def segment_distance(p: PlanePoint, a: PlanePoint, b: PlanePoint) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    length2 = dx * dx + dy * dy
    if length2 == 0.0:
        return math.hypot(p[0] - ax, p[1] - ay)
    t = max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / length2))
    return math.hypot(p[0] - (ax + t * dx), p[1] - (ay + t * dy))


def side_clearance(p: PlanePoint, tri: tuple[PlanePoint, PlanePoint, PlanePoint]) -> float:
    """Smallest distance to a side divided by that side's length."""
    ratios = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ratios.append(segment_distance(p, a, b) / math.hypot(b[0] - a[0], b[1] - a[1]))
    return min(ratios)


def geo_triangle_area_km2(vertices: tuple[GeoPoint, GeoPoint, GeoPoint]) -> float:
    origin = centroid(vertices)
    a, b, c = (project_km(v, origin) for v in vertices)
    return plane_area(a, b, c)


def geo_triangle_contains(
    vertices: tuple[GeoPoint, GeoPoint, GeoPoint],
    point: GeoPoint,
    *,
    origin: GeoPoint | None = None,
) -> bool:
    origin = origin or centroid(vertices)
    a, b, c = (project_km(v, origin) for v in vertices)
    return point_in_plane_triangle(project_km(point, origin), a, b, c)


def in_thales_circle(
    point: GeoPoint,
    v1: GeoPoint,
    v2: GeoPoint,
    *,
    metric: DistanceMetric = DistanceMetric.GREAT_CIRCLE,
    origin: GeoPoint | None = None,
) -> bool:
    """True if ``point`` lies in the circle whose diameter is v1-v2."""
    d1 = distance_km(point, v1, metric=metric, origin=origin)
    d2 = distance_km(point, v2, metric=metric, origin=origin)
    d12 = distance_km(v1, v2, metric=metric, origin=origin)
    return d1 * d1 + d2 * d2 <= d12 * d12


# ─── Delay-space areas ────────────────────────────────────────────────────────


def heron_area(s1: float, s2: float, s3: float) -> float | Degenerate:
    """Triangle area from side lengths (numerically stable form of Heron's formula)."""
    sides = (s1, s2, s3)
    if any(s < 0.0 for s in sides):
        raise NegativeSideError(f"negative side length: {sides}")

    order = sorted(range(3), key=lambda i: sides[i], reverse=True)
    a, b, c = (sides[i] for i in order)
    excess = a - (b + c)
    if excess > 0.0:
        if excess <= _SIDE_RELATIVE_TOLERANCE * max(1.0, a):
            return 0.0
        return Degenerate(longest=order[0], excess=excess)

    product = (a + (b + c)) * (c - (a - b)) * (c + (a - b)) * (a + (b - c))
    return 0.25 * math.sqrt(max(0.0, product))


def epsilon_area(
    baseline: Baseline,
    epsilon_ms: float,
    *,
    mode: EpsilonMode = EpsilonMode.PER_SIDE,
) -> float:
    """Area margin for a slack of ``epsilon_ms``.

    PER_SIDE inflates each baseline side by ε/2 and returns the area gained;
    RAW_AREA takes ε as ms² directly.
    """
    if epsilon_ms < 0.0:
        raise GeometryError(f"epsilon must be non-negative: {epsilon_ms}")
    if mode is EpsilonMode.RAW_AREA:
        return epsilon_ms
    x, y, z = baseline
    outer = heron_area(x, y, z)
    half = epsilon_ms / 2.0
    inflated = heron_area(x + half, y + half, z + half)
    if isinstance(outer, Degenerate) or isinstance(inflated, Degenerate):
        raise DegenerateBaselineError(f"baseline is not a triangle: {baseline}")
    return inflated - outer


@dataclass(frozen=True, slots=True)
class AreaExcess:
    """How far an estimate lies outside the delay-space triangle.

    ``excess_ms2`` is the sum of the three client sub-areas minus the outer area;
    client sub-triangles that break the triangle inequality contribute 0 and the
    largest such overrun is kept in ``side_overrun_ms``.
    """

    excess_ms2: float
    side_overrun_ms: float = 0.0

    def passes(self, margin_ms2: float, side_slack_ms: float, tolerance: float = AREA_TOLERANCE_MS2) -> bool:
        if self.side_overrun_ms > side_slack_ms:
            return False
        return self.excess_ms2 <= margin_ms2 + tolerance


def area_excess(
    est: "OwdEstimate",
    baseline: Baseline,
    *,
    tolerance: float = AREA_TOLERANCE_MS2,
) -> AreaExcess:
    """Raises InvalidIterationError (or DegenerateBaselineError) when the iteration cannot be judged."""
    if not est.valid:
        raise InvalidIterationError("MP estimate is invalid")
    x, y, z = baseline
    outer = heron_area(x, y, z)
    if isinstance(outer, Degenerate) or outer <= tolerance:
        raise DegenerateBaselineError(f"baseline is not a triangle: {baseline}")

    total = 0.0
    overrun = 0.0
    for base, p, q in ((x, est.a, est.b), (y, est.b, est.c), (z, est.c, est.a)):
        area = heron_area(base, p, q)
        if not isinstance(area, Degenerate):
            total += area
            continue
        if area.longest == 0:
            # client delays implausibly short for this verifier pair
            raise InvalidIterationError(
                f"client delays ({p:.3f}, {q:.3f}) shorter than baseline side {base:.3f}"
            )
        overrun = max(overrun, area.excess)
    return AreaExcess(excess_ms2=total - outer, side_overrun_ms=overrun)


def side_slack(epsilon_ms: float, mode: EpsilonMode = EpsilonMode.PER_SIDE) -> float:
    return epsilon_ms / 2.0 if mode is EpsilonMode.PER_SIDE else 0.0


def cpv_condition(
    est: "OwdEstimate",
    baseline: Baseline,
    epsilon_ms: float,
    *,
    mode: EpsilonMode = EpsilonMode.PER_SIDE,
    tolerance: float = AREA_TOLERANCE_MS2,
) -> bool:
    """Containment test: area(xab) + area(ybc) + area(zca) <= area(xyz) + margin(ε).

    A client sub-triangle whose long side overruns the other two by more than
    the per-side slack fails the iteration outright.
    """
    excess = area_excess(est, baseline, tolerance=tolerance)
    margin = epsilon_area(baseline, epsilon_ms, mode=mode)
    return excess.passes(margin, side_slack(epsilon_ms, mode), tolerance)


def circle_contains(
    owd_v1s: float,
    owd_v2s: float,
    owd_v1v2: float,
    epsilon_ms: float,
    *,
    rule: CircleRule = CircleRule.RIGHT_ANGLE,
    tolerance: float = AREA_TOLERANCE_MS2,
) -> bool:
    """Delay-space test for presence inside the circle on diameter V1V2."""
    if rule is CircleRule.SUM:
        return owd_v1s + owd_v2s <= math.sqrt(2.0) * owd_v1v2 + epsilon_ms + tolerance
    # ε widens the diameter: margin = (d12 + ε)² - d12²
    margin = epsilon_ms * (2.0 * owd_v1v2 + epsilon_ms)
    return owd_v1s**2 + owd_v2s**2 <= owd_v1v2**2 + margin + tolerance
