"""Tests for verifier selection and Manager request handling."""

import asyncio
import ipaddress
import math

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from geoverity.db.pins import PinStore
from geoverity.db.results import DuplicateResultError, ResultsLog
from geoverity.enums import Outcome, ProbeLayer, VerdictOutcome, VerifierHealth
from geoverity.services.cpv import CalibrationParams
from geoverity.services.geometry import GeoPoint, great_circle_km
from geoverity.services.manager import (
    BaselineBook,
    ClientNotConnectedError,
    IpLocationTable,
    Manager,
    ManagerOptions,
    NoCoverageError,
    RegisteredVerifier,
    StaleBaselineError,
    VerifierRegistry,
    health_from_status,
    select_triangle,
    select_verifiers,
)
from geoverity.services.mp import RawRelay
from geoverity.services.sessions import SessionIssuer
from geoverity.services.slv import ProbeSample, SlvRequest

NOW = 100_000
SITES = {
    "A": GeoPoint(40.0, -100.0),
    "B": GeoPoint(42.0, -98.0),
    "C": GeoPoint(40.0, -96.0),
}
CENTROID = GeoPoint(40.67, -98.0)
KM_PER_MS = 200.0


def _registry(extra=None):
    sites = dict(SITES, **(extra or {}))
    return VerifierRegistry(RegisteredVerifier(vid, loc) for vid, loc in sites.items())


def _book(ids=("A", "B", "C"), owd=None, at=NOW):
    book = BaselineBook()
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            value = owd if owd is not None else great_circle_km(SITES[a], SITES[b]) / KM_PER_MS
            book.update(a, b, value, at)
    return book


class StaticSession:
    session_id = "static"
    verifier_ids = ("A", "B", "C")

    def __init__(self, owd):
        self.owd = owd

    def offset_corrections(self):
        return {}

    async def run_turn(self, seq, origin, *, timeout_ms):
        return [
            RawRelay(origin, observer, 0.0, self.owd[origin] + self.owd[observer])
            for observer in self.verifier_ids
            if observer != origin
        ]

    async def pause(self, ms):
        pass


class Connector:
    def __init__(self, session=None, attached=("A", "B", "C")):
        self.session = session
        self.attached = attached
        self.grants = []

    async def connect(self, request_id, grant, triangle, *, timeout_ms):
        self.grants.append(grant)
        if len(self.attached) < 3:
            raise ClientNotConnectedError(self.attached, triangle.verifier_ids)
        return self.session


class GeoProber:
    """Answers with the noiseless RTT to wherever the server really is."""

    def __init__(self, server_at):
        self.server_at = server_at

    async def probe(self, verifier, server_ip, *, samples_per_layer):
        rtt = 2.0 * great_circle_km(verifier.location, self.server_at) / KM_PER_MS
        return [
            ProbeSample(layer, rtt, verifier.verifier_id, 0.0)
            for layer in ProbeLayer
            for _ in range(samples_per_layer)
        ]


def _manager(book=None, prober=None, registry=None, pins=None):
    return Manager(
        registry or _registry(),
        book or _book(),
        SessionIssuer(Ed25519PrivateKey.generate()),
        results=ResultsLog(None),
        pins=pins if pins is not None else PinStore(),
        prober=prober or GeoProber(CENTROID),
        options=ManagerOptions(params=CalibrationParams(epsilon_ms=0.0, n=8, tau=0.7), interval_ms=0),
        clock=lambda: NOW,
    )


# ─── selection ────────────────────────────────────────────────────────────────


def test_smallest_containing_triangle_wins():
    registry = _registry({"D": GeoPoint(41.0, -98.0)})
    chosen = select_verifiers(CENTROID, registry)
    assert [v.verifier_id for v in chosen] == ["A", "C", "D"]
    registry.set_health("D", VerifierHealth.DEGRADED)
    assert [v.verifier_id for v in select_verifiers(CENTROID, registry)] == ["A", "B", "C"]


def test_uncovered_point_reports_nearest():
    with pytest.raises(NoCoverageError) as info:
        select_verifiers(GeoPoint(30.0, -80.0), _registry())
    assert info.value.nearest == ("A", "B", "C")


def test_select_triangle_needs_fresh_baselines():
    triangle = select_triangle(CENTROID, _registry(), _book(owd=10.0), now_ms=NOW)
    assert triangle.triangle_id == "A+B+C"
    assert triangle.baseline == (10.0, 10.0, 10.0)
    with pytest.raises(StaleBaselineError):
        select_triangle(CENTROID, _registry(), _book(owd=10.0, at=0), now_ms=NOW, staleness_ms=60_000)


def test_baseline_book_prefers_smaller_fresh_view():
    book = BaselineBook()
    book.update("A", "B", 8.0, NOW)
    book.update("B", "A", 7.5, NOW - 100)
    assert book.get("A", "B", now_ms=NOW, staleness_ms=1000) == (7.5, NOW)
    book.update("B", "A", 1.0, 0)
    assert book.get("B", "A", now_ms=NOW, staleness_ms=1000) == (8.0, NOW)
    assert book.get("A", "C", now_ms=NOW, staleness_ms=1000) is None


@pytest.mark.parametrize(
    ("fresh", "health"),
    [
        (None, VerifierHealth.DOWN),
        ([False, False], VerifierHealth.DEGRADED),
        ([True, False], VerifierHealth.DEGRADED),
        ([True, True], VerifierHealth.OK),
    ],
)
def test_health_from_status(fresh, health):
    assert health_from_status(fresh) is health


def test_ip_table_lookup(tmp_path):
    path = tmp_path / "ips.jsonl"
    path.write_text('{"ip": "192.0.2.1", "lat": 45.0, "lon": -75.0}\n\n')
    table = IpLocationTable.load(path)
    assert table.lookup(ipaddress.ip_address("192.0.2.1")) == GeoPoint(45.0, -75.0)
    assert table.lookup(ipaddress.ip_address("192.0.2.2")) is None


# ─── CPV requests ─────────────────────────────────────────────────────────────


def test_cpv_request_accepts_centroid_client():
    manager = _manager(book=_book(owd=10.0))
    owd = 10.0 / math.sqrt(3.0)
    connector = Connector(StaticSession({"A": owd, "B": owd, "C": owd}))
    result = asyncio.run(manager.handle_cpv_request("r1", CENTROID, connector))
    assert result.outcome is Outcome.ACCEPTED
    (record,) = manager.results.records
    assert (record.request_id, record.outcome, record.triangle_id) == ("r1", "accepted", "A+B+C")
    assert connector.grants[0].asserted == CENTROID


def test_partially_attached_client_is_indeterminate():
    manager = _manager(book=_book(owd=10.0))
    result = asyncio.run(manager.handle_cpv_request("r2", CENTROID, Connector(attached=("A", "B"))))
    assert result.outcome is Outcome.INDETERMINATE
    assert result.reason == "client_not_connected"
    assert len(manager.results.records) == 1


def test_cpv_without_coverage_is_indeterminate():
    manager = _manager(book=_book(owd=10.0))
    result = asyncio.run(manager.handle_cpv_request("r3", GeoPoint(30.0, -80.0), Connector()))
    assert result.outcome is Outcome.INDETERMINATE
    assert result.reason.startswith("no_coverage")


def test_request_outcome_recorded_once():
    manager = _manager(book=_book(owd=10.0))
    asyncio.run(manager.handle_cpv_request("r4", CENTROID, Connector(attached=())))
    with pytest.raises(DuplicateResultError):
        asyncio.run(manager.handle_cpv_request("r4", CENTROID, Connector(attached=())))
    assert len(manager.results.records) == 1


class GatedConnector(Connector):
    def __init__(self, session):
        super().__init__(session)
        self.gate = asyncio.Event()

    async def connect(self, request_id, grant, triangle, *, timeout_ms):
        await self.gate.wait()
        return await super().connect(request_id, grant, triangle, timeout_ms=timeout_ms)


def test_concurrent_requests_with_one_id_run_once():
    manager = _manager(book=_book(owd=10.0))
    owd = 10.0 / math.sqrt(3.0)

    async def scenario():
        connector = GatedConnector(StaticSession({"A": owd, "B": owd, "C": owd}))
        first = asyncio.create_task(manager.handle_cpv_request("r5", CENTROID, connector))
        await asyncio.sleep(0)
        with pytest.raises(DuplicateResultError):
            await manager.handle_cpv_request("r5", CENTROID, connector)
        connector.gate.set()
        return await first, connector

    result, connector = asyncio.run(scenario())
    assert result.outcome is Outcome.ACCEPTED
    assert [r.request_id for r in manager.results.records] == ["r5"]
    assert len(connector.grants) == 1


def test_unrecorded_request_releases_its_id(monkeypatch):
    manager = _manager(book=_book(owd=10.0))
    record = manager.results.record

    def disk_full(entry):
        raise OSError("disk full")

    monkeypatch.setattr(manager.results, "record", disk_full)
    with pytest.raises(OSError):
        asyncio.run(manager.handle_cpv_request("r6", CENTROID, Connector(attached=("A",))))
    monkeypatch.setattr(manager.results, "record", record)
    result = asyncio.run(manager.handle_cpv_request("r6", CENTROID, Connector(attached=("A",))))
    assert result.reason == "client_not_connected"
    assert [r.request_id for r in manager.results.records] == ["r6"]


# ─── SLV requests ─────────────────────────────────────────────────────────────


def test_slv_truthful_server_then_pinned():
    pins = PinStore()
    manager = _manager(pins=pins)
    request = SlvRequest.parse("192.0.2.7", CENTROID.lat, CENTROID.lon, domain="example.org")
    first = asyncio.run(manager.handle_slv_request("s1", request))
    assert first.outcome is VerdictOutcome.UNSUSPICIOUS
    second = asyncio.run(manager.handle_slv_request("s2", request))
    assert second.outcome is VerdictOutcome.VERIFIED_PINNED
    assert len(pins) == 1
    assert [r.verification_passed for r in manager.results.records] == [True, True]


def test_slv_lying_server_after_pin_is_critical():
    pins = PinStore()
    request = SlvRequest.parse("192.0.2.7", CENTROID.lat, CENTROID.lon, domain="example.org")
    asyncio.run(_manager(pins=pins).handle_slv_request("s1", request))
    moved = _manager(pins=pins, prober=GeoProber(GeoPoint(40.0, -80.0)))
    verdict = asyncio.run(moved.handle_slv_request("s2", request))
    assert verdict.outcome is VerdictOutcome.CRITICAL
    assert moved.results.records[0].verification_passed is False


def test_slv_with_missing_probes_is_indeterminate():
    manager = _manager(book=_book(ids=("A", "B")))
    verdict = asyncio.run(manager.handle_slv_request("s3", SlvRequest.parse("192.0.2.7", CENTROID.lat, CENTROID.lon)))
    assert verdict.outcome is VerdictOutcome.INDETERMINATE
    (record,) = manager.results.records
    assert record.verification_passed is None
    assert record.reason
