"""manager.py — verifier selection, request orchestration and result persistence.

Structure:
  VerifierRegistry    verifiers with their positions and health
  BaselineBook        verifier-pair baselines as last reported by the verifiers
  select_triangle()   smallest registered triangle containing an asserted point
  Manager             CPV / SLV request handling; every request ends in exactly one
                      ResultRecord

The Manager never talks to sockets itself. CPV sessions come from a
``ClientConnector`` and SLV probes from a ``Prober``, so the same code runs
against the network (manager_server) and against the simulator (tests).
"""

from __future__ import annotations

import contextlib
import ipaddress
import logging
import time
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Protocol

import msgspec

from geoverity.db.pins import PinStore
from geoverity.db.results import DuplicateResultError, ResultRecord, ResultsLog
from geoverity.enums import CircleRule, EpsilonMode, RequestKind, VerdictOutcome, VerifierHealth
from geoverity.services import config as cfg
from geoverity.services.cpv import CalibrationParams, VerificationResult, verify_presence
from geoverity.services.geometry import (
    GeoPoint,
    TriangleSpec,
    geo_triangle_area_km2,
    geo_triangle_contains,
    great_circle_km,
)
from geoverity.services.mp import MpSession
from geoverity.services.sessions import SessionGrant, SessionIssuer
from geoverity.services.slv import (
    IpAddress,
    PairKey,
    Prober,
    SlvIndeterminate,
    SlvRequest,
    SlvVerdict,
    VerifierSite,
    classify_verdict,
    pair_key,
    probe_all,
    slv_verify,
)

logger = logging.getLogger(__name__)


class ManagerError(RuntimeError):
    pass


class NoCoverageError(ManagerError):
    def __init__(self, nearest: tuple[str, str, str] | None) -> None:
        self.nearest = nearest
        super().__init__(f"no verifier triangle contains the point; nearest={nearest}")


class StaleBaselineError(ManagerError):
    pass


class ClientNotConnectedError(ManagerError):
    def __init__(self, attached: Sequence[str], expected: Sequence[str]) -> None:
        self.attached = tuple(attached)
        self.expected = tuple(expected)
        super().__init__(f"client attached to {len(self.attached)} of {len(self.expected)} verifiers")


# ─── Registry ─────────────────────────────────────────────────────────────────


@dataclass(slots=True)
class RegisteredVerifier:
    verifier_id: str
    location: GeoPoint
    wire_id: int = 0
    health: VerifierHealth = VerifierHealth.OK

    @property
    def site(self) -> VerifierSite:
        return VerifierSite(verifier_id=self.verifier_id, location=self.location)


class VerifierRegistry:
    def __init__(self, verifiers: Iterable[RegisteredVerifier]) -> None:
        self._verifiers = {v.verifier_id: v for v in verifiers}

    def __iter__(self) -> Iterator[RegisteredVerifier]:
        return iter(self._verifiers.values())

    def __len__(self) -> int:
        return len(self._verifiers)

    def get(self, verifier_id: str) -> RegisteredVerifier:
        try:
            return self._verifiers[verifier_id]
        except KeyError:
            raise ManagerError(f"unknown verifier: {verifier_id}") from None

    def healthy(self) -> list[RegisteredVerifier]:
        return sorted(
            (v for v in self._verifiers.values() if v.health is VerifierHealth.OK),
            key=lambda v: v.verifier_id,
        )

    def set_health(self, verifier_id: str, health: VerifierHealth) -> None:
        entry = self.get(verifier_id)
        if entry.health is not health:
            log = logger.info if health is VerifierHealth.OK else logger.warning
            log("VERIFIER_HEALTH: verifier=%s %s -> %s", verifier_id, entry.health.value, health.value)
            entry.health = health


def health_from_status(baseline_fresh: Sequence[bool] | None) -> VerifierHealth:
    """OK with at least two fresh peer baselines; None means the verifier did not answer."""
    if baseline_fresh is None:
        return VerifierHealth.DOWN
    if sum(baseline_fresh) >= 2:
        return VerifierHealth.OK
    return VerifierHealth.DEGRADED


class BaselineBook:
    """Pair baselines as seen from either end; the smaller fresh view wins."""

    def __init__(self) -> None:
        self._views: dict[tuple[str, str], tuple[float, float]] = {}

    def update(self, reporter: str, peer: str, owd_ms: float, measured_at_ms: float) -> None:
        self._views[(reporter, peer)] = (owd_ms, measured_at_ms)

    def get(self, a: str, b: str, *, now_ms: float, staleness_ms: float) -> tuple[float, float] | None:
        fresh = [
            view
            for view in (self._views.get((a, b)), self._views.get((b, a)))
            if view is not None and view[0] > 0.0 and now_ms - view[1] <= staleness_ms
        ]
        if not fresh:
            return None
        owd = min(v[0] for v in fresh)
        return owd, max(v[1] for v in fresh)

    def pair_owds(self, ids: Sequence[str], *, now_ms: float, staleness_ms: float) -> dict[PairKey, float]:
        owds: dict[PairKey, float] = {}
        for a, b in combinations(ids, 2):
            view = self.get(a, b, now_ms=now_ms, staleness_ms=staleness_ms)
            if view is not None:
                owds[pair_key(a, b)] = view[0]
        return owds

    def triangle(
        self,
        trio: Sequence[RegisteredVerifier],
        *,
        now_ms: float,
        staleness_ms: float,
    ) -> TriangleSpec:
        a, b, c = trio
        views = []
        for p, q in ((a, b), (b, c), (a, c)):
            view = self.get(p.verifier_id, q.verifier_id, now_ms=now_ms, staleness_ms=staleness_ms)
            if view is None:
                raise StaleBaselineError(f"no fresh baseline for {p.verifier_id}-{q.verifier_id}")
            views.append(view)
        ids = (a.verifier_id, b.verifier_id, c.verifier_id)
        return TriangleSpec(
            vertices=(a.location, b.location, c.location),
            baseline=(views[0][0], views[1][0], views[2][0]),
            verifier_ids=ids,
            triangle_id="+".join(ids),
            measured_at_ms=min(v[1] for v in views),
        )


def select_verifiers(asserted: GeoPoint, registry: VerifierRegistry) -> tuple[RegisteredVerifier, ...]:
    """Smallest-area healthy triple containing ``asserted``; ties go to the smaller ids."""
    healthy = registry.healthy()
    best: tuple[float, tuple[str, ...], tuple[RegisteredVerifier, ...]] | None = None
    nearest: tuple[float, tuple[str, ...]] | None = None
    for trio in combinations(healthy, 3):
        vertices = (trio[0].location, trio[1].location, trio[2].location)
        ids = tuple(v.verifier_id for v in trio)
        area = geo_triangle_area_km2(vertices)
        if area <= 0.0:
            continue
        if geo_triangle_contains(vertices, asserted):
            if best is None or (area, ids) < best[:2]:
                best = (area, ids, trio)
        else:
            reach = sum(great_circle_km(asserted, v) for v in vertices)
            if nearest is None or (reach, ids) < nearest:
                nearest = (reach, ids)
    if best is None:
        raise NoCoverageError(nearest[1] if nearest else None)  # type: ignore[arg-type]
    return best[2]


def select_triangle(
    asserted: GeoPoint,
    registry: VerifierRegistry,
    baselines: BaselineBook,
    *,
    now_ms: float,
    staleness_ms: float = cfg.BASELINE_STALENESS_MS,
) -> TriangleSpec:
    return baselines.triangle(select_verifiers(asserted, registry), now_ms=now_ms, staleness_ms=staleness_ms)


# ─── Static IP locations ──────────────────────────────────────────────────────


class IpLocation(msgspec.Struct, frozen=True, kw_only=True):
    ip: str
    lat: float
    lon: float


class IpLocationTable:
    def __init__(self, entries: Iterable[IpLocation] = ()) -> None:
        self._table = {ipaddress.ip_address(e.ip): GeoPoint(lat=e.lat, lon=e.lon) for e in entries}

    @classmethod
    def load(cls, path: Path | str) -> IpLocationTable:
        decoder = msgspec.json.Decoder(IpLocation)
        lines = Path(path).read_bytes().splitlines()
        table = cls(decoder.decode(line) for line in lines if line.strip())
        logger.info("IP table loaded: path=%s entries=%s", path, len(table._table))
        return table

    def lookup(self, ip: IpAddress) -> GeoPoint | None:
        return self._table.get(ip)


# ─── Manager ──────────────────────────────────────────────────────────────────


class ClientConnector(Protocol):
    async def connect(
        self,
        request_id: str,
        grant: SessionGrant,
        triangle: TriangleSpec,
        *,
        timeout_ms: float,
    ) -> MpSession:
        """Hand the grant to the client and wait until all three verifiers report it attached.

        Raises ClientNotConnectedError otherwise.
        """
        ...


def _wall_clock_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True, slots=True)
class ManagerOptions:
    params: CalibrationParams = CalibrationParams()
    epsilon_mode: EpsilonMode = EpsilonMode.PER_SIDE
    interval_ms: float = cfg.DEMO_INTERVAL_MS
    relay_timeout_ms: float = cfg.RELAY_TIMEOUT_MS
    connect_timeout_ms: float = cfg.CLIENT_CONNECT_TIMEOUT_MS
    staleness_ms: float = cfg.BASELINE_STALENESS_MS
    slv_epsilon_ms: float = cfg.SLV_EPSILON_MS
    slv_samples_per_layer: int = cfg.SLV_SAMPLES_PER_LAYER
    circle_rule: CircleRule = CircleRule.RIGHT_ANGLE
    pin_cell_deg: float = cfg.PIN_CELL_DEG


class Manager:
    def __init__(
        self,
        registry: VerifierRegistry,
        baselines: BaselineBook,
        issuer: SessionIssuer,
        *,
        results: ResultsLog,
        pins: PinStore,
        prober: Prober,
        options: ManagerOptions | None = None,
        clock: Callable[[], int] = _wall_clock_ms,
    ) -> None:
        self.registry = registry
        self.baselines = baselines
        self.issuer = issuer
        self.results = results
        self.pins = pins
        self.prober = prober
        self.options = options or ManagerOptions()
        self.clock = clock
        self._in_flight: set[str] = set()

    @contextlib.contextmanager
    def claim(self, request_id: str) -> Iterator[None]:
        """Reserve ``request_id`` until its outcome is recorded.

        Raises DuplicateResultError when the id already has an outcome or is being served.
        """
        if request_id in self.results or request_id in self._in_flight:
            raise DuplicateResultError(f"request {request_id} already taken")
        self._in_flight.add(request_id)
        try:
            yield
        finally:
            self._in_flight.discard(request_id)

    async def handle_cpv_request(
        self,
        request_id: str,
        asserted: GeoPoint,
        connector: ClientConnector,
    ) -> VerificationResult:
        opts = self.options
        with self.claim(request_id):
            result, triangle = await self._run_cpv(request_id, asserted, connector)
            self.results.record(
                ResultRecord(
                    request_id=request_id,
                    kind=RequestKind.CPV.value,
                    outcome=result.outcome.value,
                    recorded_at_ms=self.clock(),
                    triangle_id=triangle.triangle_id if triangle else None,
                    pass_count=result.iterations_passed,
                    valid_count=result.iterations_valid,
                    n=opts.params.n,
                    epsilon_ms=opts.params.epsilon_ms,
                    tau=opts.params.tau,
                    tampered_count=result.iterations_tampered or None,
                    reason=result.reason,
                )
            )
        return result

    async def _run_cpv(
        self,
        request_id: str,
        asserted: GeoPoint,
        connector: ClientConnector,
    ) -> tuple[VerificationResult, TriangleSpec | None]:
        opts = self.options
        triangle: TriangleSpec | None = None
        try:
            triangle = select_triangle(
                asserted, self.registry, self.baselines, now_ms=self.clock(), staleness_ms=opts.staleness_ms
            )
            grant = self.issuer.issue(asserted, self.clock())
            session = await connector.connect(request_id, grant, triangle, timeout_ms=opts.connect_timeout_ms)
            result = await verify_presence(
                session,
                triangle,
                opts.params,
                interval_ms=opts.interval_ms,
                timeout_ms=opts.relay_timeout_ms,
                staleness_ms=opts.staleness_ms,
                now_ms=self.clock(),
                mode=opts.epsilon_mode,
            )
        except NoCoverageError as exc:
            result = VerificationResult.indeterminate(f"no_coverage: nearest={'+'.join(exc.nearest or ())}")
        except StaleBaselineError:
            result = VerificationResult.indeterminate("stale_baseline")
        except ClientNotConnectedError as exc:
            logger.warning(
                "CPV_CLIENT_MISSING: request=%s attached=%s expected=%s", request_id, exc.attached, exc.expected
            )
            result = VerificationResult.indeterminate("client_not_connected")
        except Exception:
            logger.exception("CPV request failed: request=%s", request_id)
            result = VerificationResult.indeterminate("internal_error")
        return result, triangle

    async def handle_slv_request(self, request_id: str, request: SlvRequest) -> SlvVerdict:
        opts = self.options
        with self.claim(request_id):
            verdict, triangle_id, reason = await self._run_slv(request_id, request)
            logger.info(
                "SLV_VERDICT: request=%s server=%s domain=%s outcome=%s",
                request_id,
                request.server_ip,
                request.domain,
                verdict.outcome.value,
            )
            self.results.record(
                ResultRecord(
                    request_id=request_id,
                    kind=RequestKind.SLV.value,
                    outcome=verdict.outcome.value,
                    recorded_at_ms=self.clock(),
                    triangle_id=triangle_id,
                    epsilon_ms=opts.slv_epsilon_ms,
                    server_ip=str(request.server_ip),
                    domain=request.domain,
                    verification_passed=None
                    if verdict.outcome is VerdictOutcome.INDETERMINATE
                    else verdict.verification_passed,
                    reason=reason,
                )
            )
        return verdict

    async def _run_slv(self, request_id: str, request: SlvRequest) -> tuple[SlvVerdict, str | None, str | None]:
        opts = self.options
        triangle_id: str | None = None
        reason: str | None = None
        try:
            trio = select_verifiers(request.asserted_location, self.registry)
            ids = tuple(v.verifier_id for v in trio)
            triangle_id = "+".join(ids)
            sites = [v.site for v in trio]
            estimates = await probe_all(
                self.prober, sites, request.server_ip, samples_per_layer=opts.slv_samples_per_layer
            )
            check = slv_verify(
                request,
                sites,
                {vid: est.owd_ms for vid, est in estimates.items()},
                self.baselines.pair_owds(ids, now_ms=self.clock(), staleness_ms=opts.staleness_ms),
                epsilon_ms=opts.slv_epsilon_ms,
                rule=opts.circle_rule,
            )
            verdict = classify_verdict(
                request.domain,
                check.passed,
                self.pins,
                asserted=request.asserted_location,
                now_ms=self.clock(),
                cell_deg=opts.pin_cell_deg,
                pairs=check.pairs,
            )
        except NoCoverageError as exc:
            reason = f"no_coverage: nearest={'+'.join(exc.nearest or ())}"
            verdict = _indeterminate_verdict()
        except SlvIndeterminate as exc:
            reason = str(exc)
            verdict = _indeterminate_verdict()
        except Exception:
            logger.exception("SLV request failed: request=%s", request_id)
            reason = "internal_error"
            verdict = _indeterminate_verdict()
        return verdict, triangle_id, reason


def _indeterminate_verdict() -> SlvVerdict:
    return SlvVerdict(outcome=VerdictOutcome.INDETERMINATE, verification_passed=False, was_pinned=False)
