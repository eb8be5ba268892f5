"""slv.py — server location verification.

Verifiers probe the server's IP address over two layers (TCP handshake and
HTTP request/response), keep the minimum RTT and use RTT/2 as the one-way
delay proxy. Every verifier pair whose Thales circle covers the asserted
location must then find the server inside that circle. Verdicts combine the
result with the domain's TOFU pin.

Server identity enters this module only as an IP address; nothing here
resolves names.
"""

from __future__ import annotations

import asyncio
import ipaddress
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from itertools import combinations
from typing import TYPE_CHECKING, Protocol

from geoverity.enums import CircleRule, DistanceMetric, ProbeLayer, VerdictOutcome
from geoverity.services.config import (
    PIN_CELL_DEG,
    SLV_EPSILON_MS,
    SLV_MIN_VERIFIERS,
    SLV_SAMPLES_PER_LAYER,
)
from geoverity.services.geometry import GeoPoint, circle_contains, in_thales_circle

if TYPE_CHECKING:
    from geoverity.db.pins import PinStore

logger = logging.getLogger(__name__)

IpAddress = ipaddress.IPv4Address | ipaddress.IPv6Address
PairKey = tuple[str, str]


class SlvError(RuntimeError):
    pass


class ProbeFailedError(SlvError):
    def __init__(self, verifier: str, server_ip: IpAddress, reason: str = "unreachable") -> None:
        self.verifier = verifier
        self.server_ip = server_ip
        self.reason = reason
        super().__init__(f"probe from {verifier} to {server_ip} failed: {reason}")


class SlvIndeterminate(SlvError):
    pass


def pair_key(v1: str, v2: str) -> PairKey:
    return (v1, v2) if v1 <= v2 else (v2, v1)


@dataclass(frozen=True, slots=True)
class VerifierSite:
    verifier_id: str
    location: GeoPoint


@dataclass(frozen=True, slots=True)
class SlvRequest:
    server_ip: IpAddress
    asserted_location: GeoPoint
    # used for pinning only, never for verification
    domain: str | None = None

    @classmethod
    def parse(cls, server_ip: str, lat: float, lon: float, domain: str | None = None) -> SlvRequest:
        return cls(
            server_ip=ipaddress.ip_address(server_ip),
            asserted_location=GeoPoint(lat=lat, lon=lon),
            domain=domain.lower().rstrip(".") if domain else None,
        )


@dataclass(frozen=True, slots=True)
class ProbeSample:
    layer: ProbeLayer
    rtt_ms: float
    verifier: str
    timestamp_ms: float

    def __post_init__(self) -> None:
        if not self.rtt_ms > 0.0:
            raise SlvError(f"probe rtt must be positive: {self.rtt_ms}")


@dataclass(frozen=True, slots=True)
class ProbeEstimate:
    verifier: str
    samples: tuple[ProbeSample, ...]

    @property
    def min_rtt_ms(self) -> float:
        return min(s.rtt_ms for s in self.samples)

    @property
    def owd_ms(self) -> float:
        return self.min_rtt_ms / 2.0


class Prober(Protocol):
    async def probe(
        self,
        verifier: VerifierSite,
        server_ip: IpAddress,
        *,
        samples_per_layer: int,
    ) -> list[ProbeSample]: ...


async def probe_server(
    prober: Prober,
    verifier: VerifierSite,
    server_ip: IpAddress,
    *,
    samples_per_layer: int = SLV_SAMPLES_PER_LAYER,
) -> ProbeEstimate:
    """Minimum RTT across all samples and layers from one verifier."""
    try:
        samples = await prober.probe(verifier, server_ip, samples_per_layer=samples_per_layer)
    except ProbeFailedError:
        raise
    except (OSError, asyncio.TimeoutError) as exc:
        raise ProbeFailedError(verifier.verifier_id, server_ip, type(exc).__name__) from exc

    if not samples:
        raise ProbeFailedError(verifier.verifier_id, server_ip, "no samples")
    per_layer = {layer: sum(1 for s in samples if s.layer is layer) for layer in ProbeLayer}
    if min(per_layer.values()) < samples_per_layer:
        logger.warning(
            "SLV_PROBE_SHORT: verifier=%s server=%s per_layer=%s",
            verifier.verifier_id,
            server_ip,
            {k.value: v for k, v in per_layer.items()},
        )
    estimate = ProbeEstimate(verifier=verifier.verifier_id, samples=tuple(samples))
    logger.debug(
        "SLV_PROBE: verifier=%s server=%s min_rtt=%.3f samples=%s",
        verifier.verifier_id,
        server_ip,
        estimate.min_rtt_ms,
        len(samples),
    )
    return estimate


async def probe_all(
    prober: Prober,
    verifiers: Sequence[VerifierSite],
    server_ip: IpAddress,
    *,
    samples_per_layer: int = SLV_SAMPLES_PER_LAYER,
) -> dict[str, ProbeEstimate]:
    """Probe concurrently; verifiers whose probes fail are left out."""
    results = await asyncio.gather(
        *(probe_server(prober, v, server_ip, samples_per_layer=samples_per_layer) for v in verifiers),
        return_exceptions=True,
    )
    estimates: dict[str, ProbeEstimate] = {}
    for verifier, result in zip(verifiers, results, strict=True):
        if isinstance(result, ProbeFailedError):
            logger.warning("SLV_PROBE_FAILED: verifier=%s server=%s reason=%s", verifier.verifier_id, server_ip, result.reason)
            continue
        if isinstance(result, BaseException):
            raise result
        estimates[verifier.verifier_id] = result
    return estimates


# ─── Circle tests ─────────────────────────────────────────────────────────────


@dataclass(frozen=True, slots=True)
class PairResult:
    v1: str
    v2: str
    covers: bool
    passed: bool | None = None


@dataclass(frozen=True, slots=True)
class SlvCheck:
    passed: bool
    pairs: tuple[PairResult, ...] = field(default_factory=tuple)


def slv_verify(
    request: SlvRequest,
    verifiers: Sequence[VerifierSite],
    server_owd_ms: Mapping[str, float],
    baseline_owd_ms: Mapping[PairKey, float],
    *,
    epsilon_ms: float = SLV_EPSILON_MS,
    rule: CircleRule = CircleRule.RIGHT_ANGLE,
    metric: DistanceMetric = DistanceMetric.GREAT_CIRCLE,
    origin: GeoPoint | None = None,
    min_verifiers: int = SLV_MIN_VERIFIERS,
) -> SlvCheck:
    """AND over all verifier pairs whose circle covers the asserted location.

    Raises SlvIndeterminate when fewer than ``min_verifiers`` have a delay or no
    pair covers the assertion.
    """
    usable = sorted(
        (v for v in verifiers if v.verifier_id in server_owd_ms),
        key=lambda v: v.verifier_id,
    )
    if len(usable) < min_verifiers:
        raise SlvIndeterminate(f"only {len(usable)} verifiers with successful probes")

    pairs: list[PairResult] = []
    for v1, v2 in combinations(usable, 2):
        covers = in_thales_circle(
            request.asserted_location, v1.location, v2.location, metric=metric, origin=origin
        )
        if not covers:
            pairs.append(PairResult(v1=v1.verifier_id, v2=v2.verifier_id, covers=False))
            continue
        key = pair_key(v1.verifier_id, v2.verifier_id)
        if key not in baseline_owd_ms:
            raise SlvIndeterminate(f"no baseline delay for verifier pair {key}")
        passed = circle_contains(
            server_owd_ms[v1.verifier_id],
            server_owd_ms[v2.verifier_id],
            baseline_owd_ms[key],
            epsilon_ms,
            rule=rule,
        )
        pairs.append(PairResult(v1=v1.verifier_id, v2=v2.verifier_id, covers=True, passed=passed))

    covering = [p for p in pairs if p.covers]
    if not covering:
        raise SlvIndeterminate("no verifier pair covers the asserted location")
    return SlvCheck(passed=all(p.passed for p in covering), pairs=tuple(pairs))


@dataclass(frozen=True, slots=True)
class SlvMeasurement:
    """Everything slv_verify needs, kept so the decision can be replayed for other ε."""

    request: SlvRequest
    verifiers: tuple[VerifierSite, ...]
    server_owd_ms: Mapping[str, float]
    baseline_owd_ms: Mapping[PairKey, float]

    def check(
        self,
        epsilon_ms: float,
        *,
        rule: CircleRule = CircleRule.RIGHT_ANGLE,
        metric: DistanceMetric = DistanceMetric.GREAT_CIRCLE,
        origin: GeoPoint | None = None,
    ) -> SlvCheck:
        return slv_verify(
            self.request,
            self.verifiers,
            self.server_owd_ms,
            self.baseline_owd_ms,
            epsilon_ms=epsilon_ms,
            rule=rule,
            metric=metric,
            origin=origin,
        )


# ─── Verdicts and pins ────────────────────────────────────────────────────────


@dataclass(frozen=True, slots=True)
class SlvVerdict:
    outcome: VerdictOutcome
    verification_passed: bool
    was_pinned: bool
    pairs: tuple[PairResult, ...] = field(default_factory=tuple)


def quantize_cell(location: GeoPoint, cell_deg: float = PIN_CELL_DEG) -> tuple[float, float]:
    """South-west corner of the cell containing ``location``."""
    return (
        math.floor(location.lat / cell_deg) * cell_deg,
        math.floor(location.lon / cell_deg) * cell_deg,
    )


def verdict_for(was_pinned: bool, verification_passed: bool) -> VerdictOutcome:
    if verification_passed:
        return VerdictOutcome.VERIFIED_PINNED if was_pinned else VerdictOutcome.UNSUSPICIOUS
    return VerdictOutcome.CRITICAL if was_pinned else VerdictOutcome.SUSPICIOUS


def classify_verdict(
    domain: str | None,
    verification_passed: bool,
    pins: PinStore,
    *,
    asserted: GeoPoint,
    now_ms: int,
    cell_deg: float = PIN_CELL_DEG,
    pairs: tuple[PairResult, ...] = (),
) -> SlvVerdict:
    """Classify and apply TOFU: only a passing verification writes a pin."""
    cell_lat, cell_lon = quantize_cell(asserted, cell_deg)
    was_pinned = domain is not None and pins.get(domain, cell_lat, cell_lon) is not None
    outcome = verdict_for(was_pinned, verification_passed)

    if domain is not None and verification_passed:
        record = pins.put(domain, cell_lat, cell_lon, now_ms=now_ms)
        event = "PIN_CREATED" if outcome is VerdictOutcome.UNSUSPICIOUS else "PIN_REFRESHED"
        logger.info(
            "%s: domain=%s cell=%s,%s first_verified=%s",
            event,
            domain,
            cell_lat,
            cell_lon,
            record.first_verified,
        )
    if outcome is VerdictOutcome.CRITICAL:
        logger.warning("SLV_CRITICAL: domain=%s cell=%s,%s", domain, cell_lat, cell_lon)

    return SlvVerdict(
        outcome=outcome,
        verification_passed=verification_passed,
        was_pinned=was_pinned,
        pairs=pairs,
    )
