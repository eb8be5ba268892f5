"""Tests for generated triangle batteries."""

import math

import numpy as np
import pytest

from geoverity.services.battery import (
    BatterySettings,
    generate_battery,
    near_equilateral,
    sample_inside,
)
from geoverity.services.geometry import point_in_plane_triangle, project_km, side_clearance


def _angles(tri):
    out = []
    for i in range(3):
        p, q, r = (np.asarray(tri[(i + k) % 3]) for k in range(3))
        u, v = q - p, r - p
        out.append(math.degrees(math.acos(float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v)))))
    return out


def test_near_equilateral_shape():
    rng = np.random.default_rng(0)
    for _ in range(200):
        tri = near_equilateral(rng)
        angles = _angles(tri)
        assert sum(angles) == pytest.approx(180.0, abs=1e-6)
        assert all(49.999 <= a <= 70.001 for a in angles)
        (ax, ay), (bx, by), (cx, cy) = tri
        area = abs((bx - ax) * (cy - ay) - (cx - ax) * (by - ay)) / 2.0
        assert math.pi * 100.0**2 * 0.999 <= area <= math.pi * 400.0**2 * 1.001


def test_inside_samples_clear_the_margin():
    rng = np.random.default_rng(1)
    tri = near_equilateral(rng)
    for _ in range(500):
        point = sample_inside(rng, tri, 0.1)
        assert point_in_plane_triangle(point, *tri)
        assert side_clearance(point, tri) >= 0.1


def test_battery_layout():
    battery = generate_battery(BatterySettings(triangles=3, inside_clients=4, outside_clients=5, servers=2), seed=7)
    assert len(battery.triangles) == 3
    ids = [n.node_id for n in battery.nodes]
    assert len(ids) == len(set(ids)) == 3 * (3 + 4 + 5 + 2)
    by_id = {n.node_id: n for n in battery.nodes}
    for tri in battery.triangles:
        plane = tuple(project_km(by_id[v].location, battery.origin) for v in tri.verifiers)
        inside = [point_in_plane_triangle(project_km(by_id[c].location, battery.origin), *plane) for c in tri.clients]
        assert inside == [True] * 4 + [False] * 5
        assert [s.truthful for s in tri.servers] == [True, False]


def test_battery_is_seeded():
    settings = BatterySettings(triangles=2, inside_clients=3, outside_clients=3)
    first = generate_battery(settings, seed=1)
    assert first.nodes == generate_battery(settings, seed=1).nodes
    assert first.nodes != generate_battery(settings, seed=2).nodes
