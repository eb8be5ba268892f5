"""Tests for geoverity.services.slv."""

import asyncio
import ipaddress
import itertools

import numpy as np
import pytest

from geoverity.db.pins import PinStore
from geoverity.enums import DistanceMetric, ProbeLayer, VerdictOutcome
from geoverity.services.geometry import GeoPoint, project_km
from geoverity.services.slv import (
    ProbeFailedError,
    ProbeSample,
    SlvError,
    SlvIndeterminate,
    SlvRequest,
    VerifierSite,
    classify_verdict,
    pair_key,
    probe_all,
    probe_server,
    quantize_cell,
    slv_verify,
    verdict_for,
)

SERVER = ipaddress.ip_address("192.0.2.10")
KM_PER_MS = 200.0
ORIGIN = GeoPoint(40.0, -95.0)


class TableProber:
    def __init__(self, rtts, failing=()):
        self.rtts = rtts
        self.failing = set(failing)

    async def probe(self, verifier, server_ip, *, samples_per_layer):
        if verifier.verifier_id in self.failing:
            raise ProbeFailedError(verifier.verifier_id, server_ip)
        out = []
        for layer, rtt in self.rtts[verifier.verifier_id].items():
            out += [ProbeSample(layer, rtt + i, verifier.verifier_id, float(i)) for i in range(samples_per_layer)]
        return out


class BrokenProber:
    async def probe(self, verifier, server_ip, *, samples_per_layer):
        raise ConnectionRefusedError("refused")


def _site(vid, lat, lon):
    return VerifierSite(vid, GeoPoint(lat, lon))


def _planar(p, q):
    (px, py), (qx, qy) = project_km(p, ORIGIN), project_km(q, ORIGIN)
    return float(np.hypot(px - qx, py - qy))


def _exact_delays(sites, server_location):
    server = {s.verifier_id: _planar(s.location, server_location) / KM_PER_MS for s in sites}
    baseline = {
        pair_key(a.verifier_id, b.verifier_id): _planar(a.location, b.location) / KM_PER_MS
        for a, b in itertools.combinations(sites, 2)
    }
    return server, baseline


TRIPLE = (_site("V1", 38.0, -97.0), _site("V2", 38.0, -93.0), _site("V3", 41.5, -95.0))


# ─── probing ──────────────────────────────────────────────────────────────────


def test_probe_minimum_across_layers():
    prober = TableProber({"V1": {ProbeLayer.TCP_HANDSHAKE: 20.0, ProbeLayer.HTTP_REQUEST_RESPONSE: 24.0}})
    estimate = asyncio.run(probe_server(prober, TRIPLE[0], SERVER, samples_per_layer=3))
    assert estimate.min_rtt_ms == 20.0
    assert estimate.owd_ms == 10.0
    assert len(estimate.samples) == 6


def test_probe_failure_wraps_socket_errors():
    with pytest.raises(ProbeFailedError) as info:
        asyncio.run(probe_server(BrokenProber(), TRIPLE[0], SERVER))
    assert info.value.reason == "ConnectionRefusedError"


def test_probe_all_drops_failed_verifiers():
    rtts = {v.verifier_id: {ProbeLayer.TCP_HANDSHAKE: 10.0, ProbeLayer.HTTP_REQUEST_RESPONSE: 12.0} for v in TRIPLE}
    estimates = asyncio.run(probe_all(TableProber(rtts, failing={"V2"}), TRIPLE, SERVER))
    assert sorted(estimates) == ["V1", "V3"]


def test_probe_sample_needs_positive_rtt():
    with pytest.raises(SlvError):
        ProbeSample(ProbeLayer.TCP_HANDSHAKE, 0.0, "V1", 0.0)


def test_request_keeps_ip_and_normalizes_domain():
    request = SlvRequest.parse("2001:db8::1", 40.0, -95.0, domain="Example.ORG.")
    assert request.server_ip == ipaddress.ip_address("2001:db8::1")
    assert request.domain == "example.org"


# ─── slv_verify ───────────────────────────────────────────────────────────────


def test_server_at_asserted_location_passes():
    asserted = GeoPoint(39.0, -95.0)
    server, baseline = _exact_delays(TRIPLE, asserted)
    request = SlvRequest(SERVER, asserted)
    check = slv_verify(request, TRIPLE, server, baseline, epsilon_ms=0.0, metric=DistanceMetric.PLANAR, origin=ORIGIN)
    assert check.passed
    assert any(p.covers for p in check.pairs)


def test_server_far_from_assertion_fails():
    asserted = GeoPoint(39.0, -95.0)
    # roughly 2000 km east
    server, baseline = _exact_delays(TRIPLE, GeoPoint(39.0, -72.0))
    request = SlvRequest(SERVER, asserted)
    check = slv_verify(request, TRIPLE, server, baseline, epsilon_ms=0.0, metric=DistanceMetric.PLANAR, origin=ORIGIN)
    assert not check.passed


def test_too_few_verifiers_is_indeterminate():
    server, baseline = _exact_delays(TRIPLE[:2], GeoPoint(38.0, -95.0))
    with pytest.raises(SlvIndeterminate):
        slv_verify(SlvRequest(SERVER, GeoPoint(38.0, -95.0)), TRIPLE, server, baseline)


def test_uncovered_assertion_is_indeterminate():
    asserted = GeoPoint(48.0, -70.0)
    server, baseline = _exact_delays(TRIPLE, asserted)
    with pytest.raises(SlvIndeterminate):
        slv_verify(SlvRequest(SERVER, asserted), TRIPLE, server, baseline, metric=DistanceMetric.PLANAR, origin=ORIGIN)


def test_noiseless_agrees_with_circle_oracle():
    rng = np.random.default_rng(21)
    checked = 0
    while checked < 500:
        lats = rng.uniform(36.0, 44.0, size=3)
        lons = rng.uniform(-100.0, -90.0, size=3)
        sites = tuple(_site(f"V{i}", float(la), float(lo)) for i, (la, lo) in enumerate(zip(lats, lons)))
        asserted = GeoPoint(float(rng.uniform(37.0, 43.0)), float(rng.uniform(-99.0, -91.0)))
        server_at = asserted if rng.random() < 0.5 else GeoPoint(float(rng.uniform(36.0, 44.0)), float(rng.uniform(-100.0, -90.0)))

        covering, expected, near_edge = [], True, False
        for a, b in itertools.combinations(sites, 2):
            d12 = _planar(a.location, b.location)
            cover_slack = d12**2 - _planar(asserted, a.location) ** 2 - _planar(asserted, b.location) ** 2
            near_edge |= abs(cover_slack) < 1e-3 * d12**2
            if cover_slack < 0.0:
                continue
            covering.append((a, b))
            slack = d12**2 - _planar(server_at, a.location) ** 2 - _planar(server_at, b.location) ** 2
            near_edge |= abs(slack) < 1e-3 * d12**2
            expected &= slack >= 0.0
        if not covering or near_edge:
            continue

        server, baseline = _exact_delays(sites, server_at)
        check = slv_verify(
            SlvRequest(SERVER, asserted), sites, server, baseline, epsilon_ms=0.0, metric=DistanceMetric.PLANAR, origin=ORIGIN
        )
        assert check.passed is expected
        checked += 1


# ─── verdicts ─────────────────────────────────────────────────────────────────


@pytest.mark.parametrize(
    ("was_pinned", "passed", "outcome"),
    [
        (True, False, VerdictOutcome.CRITICAL),
        (False, False, VerdictOutcome.SUSPICIOUS),
        (False, True, VerdictOutcome.UNSUSPICIOUS),
        (True, True, VerdictOutcome.VERIFIED_PINNED),
    ],
)
def test_verdict_table(was_pinned, passed, outcome):
    assert verdict_for(was_pinned, passed) is outcome


def test_classify_pins_on_first_pass_only():
    pins = PinStore()
    here = GeoPoint(45.2, -75.7)
    first = classify_verdict("example.org", True, pins, asserted=here, now_ms=1000)
    assert first.outcome is VerdictOutcome.UNSUSPICIOUS
    assert len(pins) == 1
    second = classify_verdict("example.org", True, pins, asserted=here, now_ms=2000)
    assert second.outcome is VerdictOutcome.VERIFIED_PINNED
    (record,) = pins.lookup("example.org")
    assert (record.first_verified, record.last_verified) == (1000, 2000)
    third = classify_verdict("example.org", False, pins, asserted=here, now_ms=3000)
    assert third.outcome is VerdictOutcome.CRITICAL
    assert pins.lookup("example.org")[0].last_verified == 2000


def test_failed_verifications_never_pin():
    pins = PinStore()
    for t in range(10):
        verdict = classify_verdict("example.net", False, pins, asserted=GeoPoint(10.0, 10.0), now_ms=t)
        assert verdict.outcome is VerdictOutcome.SUSPICIOUS
    assert len(pins) == 0


def test_pins_are_per_cell():
    pins = PinStore()
    classify_verdict("example.org", True, pins, asserted=GeoPoint(45.2, -75.7), now_ms=1)
    moved = classify_verdict("example.org", False, pins, asserted=GeoPoint(48.9, 2.3), now_ms=2)
    assert moved.outcome is VerdictOutcome.SUSPICIOUS


def test_quantize_cell():
    assert quantize_cell(GeoPoint(45.2, -75.7)) == (45.0, -76.0)
    assert quantize_cell(GeoPoint(45.2, -75.7), 1.0) == (45.0, -76.0)
