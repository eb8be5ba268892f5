"""battery.py — generated verification triangles with inside/outside clients.

Triangles are near-equilateral (inside angles in [50°, 70°]) with an area
between that of a 100 km and a 400 km radius circle. Everything is laid out
in the plane of one equirectangular projection around the region centre and
then mapped back to coordinates, so planar-metric simulations see exactly the
generated geometry.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from geoverity.enums import AccessType
from geoverity.services import config as cfg
from geoverity.services.geometry import (
    GeoPoint,
    PlanePoint,
    point_in_plane_triangle,
    project_km,
    side_clearance,
    unproject_km,
)
from geoverity.services.netsim import SimNode

logger = logging.getLogger(__name__)

PlaneTriangle = tuple[PlanePoint, PlanePoint, PlanePoint]

# lat_min, lat_max, lon_min, lon_max
CONTINENTAL_REGION: tuple[float, float, float, float] = (25.0, 55.0, -125.0, -65.0)

_MAX_TRIES = 10_000


class BatteryError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class BatterySettings:
    triangles: int = 5
    inside_clients: int = 100
    outside_clients: int = 100
    ground_truth_inside: int = 0
    ground_truth_outside: int = 0
    servers: int = 0
    region: tuple[float, float, float, float] = CONTINENTAL_REGION
    angle_range_deg: tuple[float, float] = cfg.TRIANGLE_ANGLE_RANGE_DEG
    radius_range_km: tuple[float, float] = cfg.TRIANGLE_RADIUS_RANGE_KM
    margin_fraction: float = cfg.INSIDE_MARGIN_FRACTION
    # "region": uniform over the region box; "annulus": ring around the triangle centroid
    outside_mode: str = "region"
    annulus_km: tuple[float, float] = (2000.0, 4500.0)
    false_server_km: tuple[float, float] = (2500.0, 4000.0)


@dataclass(frozen=True, slots=True)
class ServerCase:
    server_id: str
    asserted: GeoPoint
    truthful: bool


@dataclass(slots=True)
class BatteryTriangle:
    triangle_id: str
    verifiers: tuple[str, str, str]
    clients: list[str] = field(default_factory=list)
    ground_truth: list[str] = field(default_factory=list)
    servers: list[ServerCase] = field(default_factory=list)


@dataclass(slots=True)
class Battery:
    origin: GeoPoint
    nodes: list[SimNode]
    triangles: list[BatteryTriangle]


def near_equilateral(
    rng: np.random.Generator,
    *,
    angle_range_deg: tuple[float, float] = cfg.TRIANGLE_ANGLE_RANGE_DEG,
    radius_range_km: tuple[float, float] = cfg.TRIANGLE_RADIUS_RANGE_KM,
    center: PlanePoint = (0.0, 0.0),
) -> PlaneTriangle:
    lo, hi = angle_range_deg
    for _ in range(_MAX_TRIES):
        alpha, beta = rng.uniform(lo, hi, size=2)
        gamma = 180.0 - alpha - beta
        if lo <= gamma <= hi:
            break
    else:
        raise BatteryError(f"cannot draw angles within {angle_range_deg}")

    radius = rng.uniform(*radius_range_km)
    area = math.pi * radius * radius
    a_rad, b_rad, g_rad = (math.radians(v) for v in (alpha, beta, gamma))
    # law of sines, then scale so the area matches
    side_c = 1.0
    side_b = side_c * math.sin(b_rad) / math.sin(g_rad)
    unit_area = 0.5 * side_b * side_c * math.sin(a_rad)
    scale = math.sqrt(area / unit_area)

    pts = np.array(
        [
            [0.0, 0.0],
            [side_c * scale, 0.0],
            [side_b * scale * math.cos(a_rad), side_b * scale * math.sin(a_rad)],
        ]
    )
    pts -= pts.mean(axis=0)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    pts = pts @ rot.T + np.asarray(center)
    return tuple((float(x), float(y)) for x, y in pts)  # type: ignore[return-value]


def sample_inside(rng: np.random.Generator, tri: PlaneTriangle, margin_fraction: float) -> PlanePoint:
    a, b, c = (np.asarray(p) for p in tri)
    for _ in range(_MAX_TRIES):
        r1, r2 = rng.random(2)
        s = math.sqrt(r1)
        p = (1.0 - s) * a + s * (1.0 - r2) * b + s * r2 * c
        point = (float(p[0]), float(p[1]))
        if side_clearance(point, tri) >= margin_fraction:
            return point
    raise BatteryError("no inside point clears the side margin")


def _outside_ok(point: PlanePoint, tri: PlaneTriangle, margin_fraction: float) -> bool:
    if point_in_plane_triangle(point, *tri):
        return False
    return side_clearance(point, tri) >= margin_fraction


def sample_outside_annulus(
    rng: np.random.Generator,
    tri: PlaneTriangle,
    annulus_km: tuple[float, float],
    margin_fraction: float,
) -> PlanePoint:
    cx = sum(p[0] for p in tri) / 3.0
    cy = sum(p[1] for p in tri) / 3.0
    r_lo, r_hi = annulus_km
    for _ in range(_MAX_TRIES):
        radius = math.sqrt(rng.uniform(r_lo * r_lo, r_hi * r_hi))
        theta = rng.uniform(0.0, 2.0 * math.pi)
        point = (cx + radius * math.cos(theta), cy + radius * math.sin(theta))
        if _outside_ok(point, tri, margin_fraction):
            return point
    raise BatteryError("no outside point in annulus")


def sample_outside_region(
    rng: np.random.Generator,
    tri: PlaneTriangle,
    region_plane: tuple[float, float, float, float],
    margin_fraction: float,
) -> PlanePoint:
    x_lo, x_hi, y_lo, y_hi = region_plane
    for _ in range(_MAX_TRIES):
        point = (float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi)))
        if _outside_ok(point, tri, margin_fraction):
            return point
    raise BatteryError("no outside point in region")


def generate_battery(settings: BatterySettings, *, seed: int = 0) -> Battery:
    """Triangles plus their own clients, ground-truth nodes and SLV servers."""
    rng = np.random.default_rng([seed, 0xBA77])
    lat_lo, lat_hi, lon_lo, lon_hi = settings.region
    origin = GeoPoint(lat=(lat_lo + lat_hi) / 2.0, lon=(lon_lo + lon_hi) / 2.0)
    sw = project_km(GeoPoint(lat=lat_lo, lon=lon_lo), origin)
    ne = project_km(GeoPoint(lat=lat_hi, lon=lon_hi), origin)
    region_plane = (sw[0], ne[0], sw[1], ne[1])
    # keep whole triangles inside the box
    inset = 1000.0

    nodes: list[SimNode] = []
    triangles: list[BatteryTriangle] = []

    def add(node_id: str, xy: PlanePoint) -> str:
        nodes.append(SimNode(node_id=node_id, location=unproject_km(xy, origin), access_type=AccessType.WIRED))
        return node_id

    def outside(tri: PlaneTriangle) -> PlanePoint:
        if settings.outside_mode == "annulus":
            return sample_outside_annulus(rng, tri, settings.annulus_km, settings.margin_fraction)
        return sample_outside_region(rng, tri, region_plane, settings.margin_fraction)

    for t in range(settings.triangles):
        center = (
            float(rng.uniform(region_plane[0] + inset, region_plane[1] - inset)),
            float(rng.uniform(region_plane[2] + inset, region_plane[3] - inset)),
        )
        tri = near_equilateral(
            rng,
            angle_range_deg=settings.angle_range_deg,
            radius_range_km=settings.radius_range_km,
            center=center,
        )
        tid = f"t{t:02d}"
        verifiers = tuple(add(f"{tid}-v{j}", p) for j, p in enumerate(tri))
        entry = BatteryTriangle(triangle_id=tid, verifiers=verifiers)  # type: ignore[arg-type]

        for k in range(settings.inside_clients):
            entry.clients.append(add(f"{tid}-in{k:03d}", sample_inside(rng, tri, settings.margin_fraction)))
        for k in range(settings.outside_clients):
            entry.clients.append(add(f"{tid}-out{k:03d}", outside(tri)))
        for k in range(settings.ground_truth_inside):
            entry.ground_truth.append(add(f"{tid}-gti{k:03d}", sample_inside(rng, tri, settings.margin_fraction)))
        for k in range(settings.ground_truth_outside):
            entry.ground_truth.append(add(f"{tid}-gto{k:03d}", outside(tri)))

        for k in range(settings.servers):
            asserted_xy = sample_inside(rng, tri, settings.margin_fraction)
            truthful = k % 2 == 0
            if truthful:
                server_xy = asserted_xy
            else:
                distance = rng.uniform(*settings.false_server_km)
                theta = rng.uniform(0.0, 2.0 * math.pi)
                server_xy = (
                    asserted_xy[0] + distance * math.cos(theta),
                    asserted_xy[1] + distance * math.sin(theta),
                )
            server_id = add(f"{tid}-srv{k:03d}", server_xy)
            entry.servers.append(
                ServerCase(server_id=server_id, asserted=unproject_km(asserted_xy, origin), truthful=truthful)
            )
        triangles.append(entry)

    logger.info("BATTERY: triangles=%s nodes=%s seed=%s", len(triangles), len(nodes), seed)
    return Battery(origin=origin, nodes=nodes, triangles=triangles)
