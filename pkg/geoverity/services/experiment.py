"""experiment.py — CPV and SLV experiments over the simulated network.

Structure:
  config    — msgspec structs decoded from an experiment JSON file
  sessions  — SimMpSession / SimProber: the MP and probing transports in virtual time
  runner    — run_experiment(): baselines, optional calibration, per-node verdicts,
              FA/FR summaries, all as report records

Usage:
  config = load_config(Path("experiment.json"))
  report = await run_experiment(config)
  Path("report.jsonl").write_bytes(report.encode())

A report depends only on the config: there is no wall clock anywhere in here.
"""

from __future__ import annotations

import ipaddress
import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import msgspec

from geoverity.db.base import decode_lines
from geoverity.db.pins import PinStore
from geoverity.db.results import (
    NodeRecord,
    ReportRecord,
    SkippedRecord,
    SlvRecord,
    SummaryRecord,
    TraceRecord,
    encode_report,
)
from geoverity.enums import (
    AccessType,
    AdversaryKind,
    CircleRule,
    DistanceMetric,
    EpsilonMode,
    ExperimentKind,
    JitterKind,
    Outcome,
    ProbeLayer,
    PuzzleStrategy,
    VerdictOutcome,
)
from geoverity.services import config as cfg
from geoverity.services.battery import BatterySettings, generate_battery
from geoverity.services.calibration import (
    CalibrationError,
    CalibrationFailed,
    GroundTruthTrace,
    calibrate,
    calibrate_slv_epsilon,
)
from geoverity.services.clock import ClockSyncState
from geoverity.services.cpv import (
    CalibrationParams,
    VerificationResult,
    baseline_is_fresh,
    collect_rounds,
    evaluate_fa_fr,
    judge_round,
    tally,
)
from geoverity.services.geometry import (
    Degenerate,
    GeometryError,
    GeoPoint,
    TriangleSpec,
    centroid,
    heron_area,
    point_in_plane_triangle,
    project_km,
    side_clearance,
)
from geoverity.services.middlebox import MiddleboxTrace, simulate_middlebox
from geoverity.services.mp import MpRound, RawRelay, RelayTamperedError
from geoverity.services.netsim import (
    AdversaryConfig,
    DelayModelParams,
    SimNode,
    SimTopology,
    UnknownNodeError,
    Wifi80211Params,
)
from geoverity.services.puzzle import message_digest, puzzle_generate, puzzle_solve, puzzle_verify
from geoverity.services.slv import (
    IpAddress,
    ProbeFailedError,
    ProbeSample,
    SlvIndeterminate,
    SlvMeasurement,
    SlvRequest,
    VerifierSite,
    classify_verdict,
    pair_key,
    probe_all,
)

logger = logging.getLogger(__name__)

# message indices below this are left to baseline exchanges
_MP_INDEX_BASE = 1024


class ExperimentError(RuntimeError):
    pass


# ─── Config ───────────────────────────────────────────────────────────────────


class NodeSpec(msgspec.Struct, frozen=True, kw_only=True):
    node_id: str
    lat: float
    lon: float
    access_type: AccessType = AccessType.WIRED

    def to_node(self) -> SimNode:
        return SimNode(node_id=self.node_id, location=GeoPoint(lat=self.lat, lon=self.lon), access_type=self.access_type)


class SlvCase(msgspec.Struct, frozen=True, kw_only=True):
    server_id: str
    # asserted location, not necessarily where the server node is
    lat: float
    lon: float
    truthful: bool


class TriangleSource(msgspec.Struct, frozen=True, kw_only=True):
    triangle_id: str
    verifiers: tuple[str, str, str]
    # None: every node that is not a verifier, ground-truth node or server
    clients: list[str] | None = None
    ground_truth: list[str] = msgspec.field(default_factory=list)
    servers: list[SlvCase] = msgspec.field(default_factory=list)


class DelaySpec(msgspec.Struct, frozen=True, kw_only=True):
    speed_factor: float = cfg.FIBER_SPEED_FACTOR
    jitter: JitterKind = JitterKind.EXPONENTIAL
    jitter_mean_ms: float = cfg.JITTER_MEAN_MS
    lognormal_mu: float = 0.0
    lognormal_sigma: float = 0.5
    asymmetry_range: tuple[float, float] = cfg.ASYMMETRY_RANGE
    circuitous_range: tuple[float, float] = cfg.CIRCUITOUS_RANGE

    def to_params(self) -> DelayModelParams:
        return DelayModelParams(
            speed_factor=self.speed_factor,
            jitter=self.jitter,
            jitter_mean_ms=self.jitter_mean_ms,
            lognormal_mu=self.lognormal_mu,
            lognormal_sigma=self.lognormal_sigma,
            asymmetry_range=self.asymmetry_range,
            circuitous_range=self.circuitous_range,
        )


class WifiSpec(msgspec.Struct, frozen=True, kw_only=True):
    slot_us: float = cfg.WIFI_SLOT_US
    gateway_prop_us: float = cfg.WIFI_GATEWAY_PROP_US
    competing_stations: int = cfg.WIFI_COMPETING_STATIONS
    cw_min: int = cfg.WIFI_CW_MIN
    cw_max: int = cfg.WIFI_CW_MAX
    max_retries: int = cfg.WIFI_MAX_RETRIES

    def to_params(self) -> Wifi80211Params:
        return Wifi80211Params(
            slot_us=self.slot_us,
            gateway_prop_us=self.gateway_prop_us,
            competing_stations=self.competing_stations,
            cw_min=self.cw_min,
            cw_max=self.cw_max,
            max_retries=self.max_retries,
        )


class AdversarySpec(msgspec.Struct, frozen=True, kw_only=True):
    kind: AdversaryKind = AdversaryKind.NONE
    target_legs: list[tuple[str, str]] = msgspec.field(default_factory=list)
    added_ms: float = 0.0
    middlebox_node: str | None = None
    client_true_node: str | None = None
    strategy: PuzzleStrategy = PuzzleStrategy.FORWARD_TO_CLIENT
    relayed_clients: int = 1
    cores: int = 1
    core_hash_rate: float = 100.0
    # None: relay sessions run against every triangle
    triangle_id: str | None = None

    def to_config(self) -> AdversaryConfig:
        return AdversaryConfig(
            kind=self.kind,
            target_legs=tuple(self.target_legs),
            added_ms=self.added_ms,
            middlebox_node=self.middlebox_node,
            client_true_node=self.client_true_node,
            strategy=self.strategy,
            relayed_clients=self.relayed_clients,
            cores=self.cores,
            core_hash_rate=self.core_hash_rate,
        )


class ParamsSpec(msgspec.Struct, frozen=True, kw_only=True):
    epsilon_ms: float = cfg.DEMO_EPSILON_MS
    n: int = cfg.DEMO_ITERATIONS
    tau: float = cfg.DEMO_TAU
    # several n values replay truncations of the same recorded rounds
    n_sweep: list[int] | None = None
    calibrate: bool = False
    calibration_epsilons: list[float] | None = None
    calibration_taus: list[float] | None = None
    epsilon_mode: EpsilonMode = EpsilonMode.PER_SIDE

    def n_values(self) -> list[int]:
        return sorted(set(self.n_sweep or [self.n]))


class BatterySpec(msgspec.Struct, frozen=True, kw_only=True):
    triangles: int = 5
    inside_clients: int = 100
    outside_clients: int = 100
    ground_truth_inside: int = 0
    ground_truth_outside: int = 0
    servers: int = 0
    region: tuple[float, float, float, float] = (25.0, 55.0, -125.0, -65.0)
    outside_mode: Literal["region", "annulus"] = "region"
    annulus_km: tuple[float, float] = (2000.0, 4500.0)

    def to_settings(self, margin_fraction: float) -> BatterySettings:
        return BatterySettings(
            triangles=self.triangles,
            inside_clients=self.inside_clients,
            outside_clients=self.outside_clients,
            ground_truth_inside=self.ground_truth_inside,
            ground_truth_outside=self.ground_truth_outside,
            servers=self.servers,
            region=self.region,
            margin_fraction=margin_fraction,
            outside_mode=self.outside_mode,
            annulus_km=self.annulus_km,
        )


class ExperimentConfig(msgspec.Struct, frozen=True, kw_only=True):
    kind: ExperimentKind = ExperimentKind.CPV
    seed: int = 0
    metric: DistanceMetric = DistanceMetric.PLANAR
    nodes: list[NodeSpec] = msgspec.field(default_factory=list)
    topology_file: str | None = None
    triangles: list[TriangleSource] = msgspec.field(default_factory=list)
    battery: BatterySpec | None = None
    delay: DelaySpec = msgspec.field(default_factory=DelaySpec)
    wifi: WifiSpec = msgspec.field(default_factory=WifiSpec)
    wifi_clients: Literal["none", "inside", "all"] = "none"
    adversary: AdversarySpec = msgspec.field(default_factory=AdversarySpec)
    params: ParamsSpec = msgspec.field(default_factory=ParamsSpec)
    interval_ms: float = cfg.DEMO_INTERVAL_MS
    timeout_ms: float = cfg.RELAY_TIMEOUT_MS
    staleness_ms: float = cfg.BASELINE_STALENESS_MS
    puzzle_difficulty: int = 0
    client_hash_rate: float = cfg.EXPERIMENT_CLIENT_HASH_RATE
    # hash real puzzles instead of drawing solve times; slow, meant for small runs
    solve_puzzles: bool = False
    baseline_window: int = cfg.BASELINE_WINDOW
    # true clock offset per verifier
    clock_offsets_ms: dict[str, float] = msgspec.field(default_factory=dict)
    # False: verifiers know the offsets (external NTP); True: four-timestamp estimates
    estimate_offsets: bool = False
    margin_fraction: float = cfg.INSIDE_MARGIN_FRACTION
    slv_epsilon_ms: float = cfg.SLV_EPSILON_MS
    slv_samples_per_layer: int = cfg.SLV_SAMPLES_PER_LAYER
    circle_rule: CircleRule = CircleRule.RIGHT_ANGLE
    calibrate_slv: bool = False
    record_traces: bool = False


def load_config(path: Path) -> ExperimentConfig:
    return msgspec.json.decode(path.read_bytes(), type=ExperimentConfig)


def load_topology(path: Path) -> list[NodeSpec]:
    """Line-delimited {node_id, lat, lon, access_type} records."""
    return decode_lines(path.read_bytes(), NodeSpec, source=path)


# ─── Simulated transports ─────────────────────────────────────────────────────

LegFn = Callable[[str, str, int], float]


class SimMpSession:
    """MP turns played through the delay model in virtual time.

    Honest clients relay directly. A middlebox relay either forwards each puzzle
    to the remote client and back, or solves it itself behind a shared queue.
    """

    def __init__(
        self,
        topology: SimTopology,
        verifier_ids: tuple[str, str, str],
        client: str,
        *,
        session_id: str,
        clocks: Mapping[str, ClockSyncState],
        clock_offsets_ms: Mapping[str, float],
        adversary: AdversaryConfig,
        leg: LegFn,
        puzzle_difficulty: int = 0,
        client_hash_rate: float = cfg.EXPERIMENT_CLIENT_HASH_RATE,
        solve_puzzles: bool = False,
        relay_slot: int | None = None,
        middlebox_trace: MiddleboxTrace | None = None,
        msg_base: int = 0,
    ) -> None:
        self.topology = topology
        self.verifier_ids = verifier_ids
        self.client = client
        self.session_id = session_id
        self.clocks = clocks
        self.clock_offsets_ms = clock_offsets_ms
        self.adversary = adversary
        self.leg = leg
        self.puzzle_difficulty = puzzle_difficulty
        self.client_hash_rate = client_hash_rate
        self.solve_puzzles = solve_puzzles
        self.relay_slot = relay_slot
        self.middlebox_trace = middlebox_trace
        self.msg_base = msg_base
        self.now_ms = 0.0
        self._rng = topology.aux_stream(session_id)

    @property
    def relayed(self) -> bool:
        return self.relay_slot is not None

    @property
    def entry(self) -> str:
        """Node the verifiers actually talk to."""
        if self.relayed:
            assert self.adversary.middlebox_node is not None
            return self.adversary.middlebox_node
        return self.client

    def offset_corrections(self) -> dict[tuple[str, str], float]:
        return {
            (origin, observer): self.clocks[observer].correction_for(origin)
            for origin in self.verifier_ids
            for observer in self.verifier_ids
            if origin != observer
        }

    async def pause(self, ms: float) -> None:
        self.now_ms += ms

    def _local(self, node: str, at_ms: float) -> float:
        return at_ms + self.clock_offsets_ms.get(node, 0.0)

    def _solve_ms(self, seq: int, origin: str, send_local: float) -> float:
        k = self.puzzle_difficulty
        if k == 0:
            return 0.0
        if not self.solve_puzzles:
            return float(self._rng.geometric(1.0 / (1 << k))) / self.client_hash_rate
        binding = message_digest(f"{self.session_id}|{seq}|{origin}|{send_local!r}".encode())
        spec = puzzle_generate(binding, k, nonce=self._rng.bytes(cfg.PUZZLE_NONCE_BYTES))
        solution = puzzle_solve(spec)
        for observer in self.verifier_ids:
            if observer != origin and not puzzle_verify(spec, solution, expected_binding=binding):
                raise RelayTamperedError(origin, observer, "puzzle")
        return solution.attempts / self.client_hash_rate

    def _processing_ms(self, seq: int, turn: int, origin: str, send_local: float, msg: int) -> float:
        if not self.relayed:
            return self._solve_ms(seq, origin, send_local)
        adversary = self.adversary
        if adversary.strategy is PuzzleStrategy.SOLVE_LOCALLY:
            assert self.middlebox_trace is not None and self.relay_slot is not None
            return self.middlebox_trace.added_delay(seq, self.relay_slot, turn)
        assert adversary.client_true_node is not None
        mb, remote = self.entry, adversary.client_true_node
        return self.leg(mb, remote, msg) + self._solve_ms(seq, origin, send_local) + self.leg(remote, mb, msg)

    async def run_turn(self, seq: int, origin: str, *, timeout_ms: float) -> list[RawRelay]:
        turn = self.verifier_ids.index(origin)
        msg = self.msg_base + _MP_INDEX_BASE + seq * 3 + turn
        send_local = self._local(origin, self.now_ms)
        inbound = self.leg(origin, self.entry, msg) + self._processing_ms(seq, turn, origin, send_local, msg)

        relays: list[RawRelay] = []
        elapsed = 0.0
        for observer in self.verifier_ids:
            if observer == origin:
                continue
            delay = inbound + self.leg(self.entry, observer, msg)
            if delay > timeout_ms:
                logger.debug("SIM_RELAY_TIMEOUT: session=%s seq=%s %s->%s", self.session_id, seq, origin, observer)
                elapsed = timeout_ms
                continue
            elapsed = max(elapsed, delay)
            relays.append(
                RawRelay(
                    origin=origin,
                    observer=observer,
                    send_ts=send_local,
                    recv_ts=self._local(observer, self.now_ms + delay),
                )
            )
        self.now_ms += elapsed
        return relays


class SimProber:
    """RTT probes answered by the delay model; servers are addressed by IP only."""

    def __init__(self, servers: dict[IpAddress, str], leg: LegFn) -> None:
        self.servers = servers
        self.leg = leg
        self._sent: dict[tuple[str, str], int] = {}

    async def probe(
        self,
        verifier: VerifierSite,
        server_ip: IpAddress,
        *,
        samples_per_layer: int,
    ) -> list[ProbeSample]:
        node = self.servers.get(server_ip)
        if node is None:
            raise ProbeFailedError(verifier.verifier_id, server_ip, "no route")
        key = (verifier.verifier_id, node)
        samples: list[ProbeSample] = []
        for layer in ProbeLayer:
            for _ in range(samples_per_layer):
                index = self._sent.get(key, 0)
                self._sent[key] = index + 1
                rtt = self.leg(verifier.verifier_id, node, index) + self.leg(node, verifier.verifier_id, index)
                samples.append(ProbeSample(layer=layer, rtt_ms=rtt, verifier=verifier.verifier_id, timestamp_ms=float(index)))
        return samples


# ─── Runner ───────────────────────────────────────────────────────────────────


@dataclass(slots=True)
class ExperimentReport:
    seed: int
    records: list[ReportRecord] = field(default_factory=list)

    def encode(self) -> bytes:
        return encode_report(self.records)

    def of_type(self, record_type: type) -> list:
        return [r for r in self.records if isinstance(r, record_type)]

    def summary(self, kind: str, n: int | None = None) -> SummaryRecord:
        for record in self.records:
            if isinstance(record, SummaryRecord) and record.kind == kind and record.n == n:
                return record
        raise ExperimentError(f"no {kind} summary for n={n}")


@dataclass(frozen=True, slots=True)
class _Placement:
    node_id: str
    inside: bool
    clearance: float


@dataclass(slots=True)
class _Triangle:
    source: TriangleSource
    spec: TriangleSpec
    clocks: dict[str, ClockSyncState]
    truth_origin: GeoPoint
    plane: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

    def place(self, topology: SimTopology, node_id: str) -> _Placement:
        xy = project_km(topology.node(node_id).location, self.truth_origin)
        return _Placement(
            node_id=node_id,
            inside=point_in_plane_triangle(xy, *self.plane),
            clearance=side_clearance(xy, self.plane),
        )


@dataclass(slots=True)
class _Tally:
    """Scored verdicts for one summary line."""

    verdicts: list[tuple[bool, VerificationResult]] = field(default_factory=list)
    excluded: int = 0
    epsilons: set[float] = field(default_factory=set)
    taus: set[float] = field(default_factory=set)


def _rate(count: int, total: int) -> float | None:
    return count / total if total else None


def _make_leg(topology: SimTopology, adversary: AdversaryConfig) -> LegFn:
    def leg(src: str, dst: str, msg: int) -> float:
        return topology.sample_owd(src, dst, msg) + adversary.inflation(src, dst)

    return leg


def _build_topology(config: ExperimentConfig) -> tuple[SimTopology, list[TriangleSource]]:
    nodes = [spec.to_node() for spec in config.nodes]
    if config.topology_file:
        nodes.extend(spec.to_node() for spec in load_topology(Path(config.topology_file)))
    triangles = list(config.triangles)
    origin: GeoPoint | None = None

    if config.battery is not None:
        battery = generate_battery(config.battery.to_settings(config.margin_fraction), seed=config.seed)
        nodes.extend(battery.nodes)
        origin = battery.origin
        by_id = {n.node_id: n for n in battery.nodes}
        for tri in battery.triangles:
            triangles.append(
                TriangleSource(
                    triangle_id=tri.triangle_id,
                    verifiers=tri.verifiers,
                    clients=list(tri.clients),
                    ground_truth=list(tri.ground_truth),
                    servers=[
                        SlvCase(server_id=s.server_id, lat=s.asserted.lat, lon=s.asserted.lon, truthful=s.truthful)
                        for s in tri.servers
                        if s.server_id in by_id
                    ],
                )
            )

    if config.metric is DistanceMetric.PLANAR and origin is None and nodes:
        origin = centroid([n.location for n in nodes])
    topology = SimTopology(
        nodes,
        delay=config.delay.to_params(),
        wifi=config.wifi.to_params(),
        seed=config.seed,
        metric=config.metric,
        origin=origin,
    )
    return topology, triangles


def _sync_clocks(
    ids: tuple[str, str, str],
    leg: LegFn,
    *,
    window: int,
    offsets: Mapping[str, float],
    estimate_offsets: bool,
) -> dict[str, ClockSyncState]:
    """Each verifier exchanges ``window`` timestamp pairs with each peer, ending at t=0."""
    period_ms = cfg.BASELINE_PERIOD_S * 1000.0
    states: dict[str, ClockSyncState] = {}
    for own in ids:
        peers = [p for p in ids if p != own]
        static = None if estimate_offsets else {p: offsets.get(p, 0.0) - offsets.get(own, 0.0) for p in peers}
        state = ClockSyncState(own, peers, window=window, static_offsets=static)
        for peer in peers:
            for i in range(window):
                index = 2 * i + (0 if own < peer else 1)
                at = -(window - i) * period_ms
                forward = leg(own, peer, index)
                reverse = leg(peer, own, index)
                t1 = at + offsets.get(own, 0.0)
                t2 = at + forward + offsets.get(peer, 0.0)
                t4 = at + forward + reverse + offsets.get(own, 0.0)
                state.record_exchange(peer, (t1, t2, t2, t4), update_offset=estimate_offsets and i == 0)
        states[own] = state
    return states


def _prepare_triangle(
    topology: SimTopology,
    source: TriangleSource,
    leg: LegFn,
    config: ExperimentConfig,
) -> _Triangle | str:
    """The ready triangle, or the reason it is skipped."""
    ids = source.verifiers
    try:
        vertices = tuple(topology.node(v).location for v in ids)
    except UnknownNodeError as exc:
        return f"unknown verifier: {exc}"
    clocks = _sync_clocks(
        ids, leg, window=config.baseline_window, offsets=config.clock_offsets_ms, estimate_offsets=config.estimate_offsets
    )

    def pair(u: str, v: str) -> float | None:
        values = [x for x in (clocks[u].baseline(v).value, clocks[v].baseline(u).value) if x is not None]
        return min(values, default=None)

    a, b, c = ids
    sides = {(u, v): pair(u, v) for u, v in ((a, b), (b, c), (a, c))}
    missing = [f"{u}-{v}" for (u, v), owd in sides.items() if owd is None]
    if missing:
        return f"no_baseline: {','.join(missing)}"
    baseline = tuple(sides.values())
    measured_at = min(clocks[v].baseline(p).measured_at_ms or 0.0 for v in ids for p in ids if p != v)
    area = heron_area(*baseline)
    if isinstance(area, Degenerate) or area <= cfg.AREA_TOLERANCE_MS2:
        return "degenerate_baseline"
    try:
        spec = TriangleSpec(
            vertices=vertices,  # type: ignore[arg-type]
            baseline=baseline,
            verifier_ids=ids,
            triangle_id=source.triangle_id,
            measured_at_ms=measured_at,
        )
    except GeometryError as exc:
        return f"degenerate_triangle: {exc}"

    truth_origin = topology.origin or centroid(list(vertices))
    plane = tuple(project_km(v, truth_origin) for v in vertices)
    return _Triangle(source=source, spec=spec, clocks=clocks, truth_origin=truth_origin, plane=plane)  # type: ignore[arg-type]


def _trace_of(tri: _Triangle, placement: _Placement, rounds: Sequence[MpRound]) -> TraceRecord:
    return TraceRecord(
        node_id=placement.node_id,
        triangle_id=tri.source.triangle_id,
        inside=placement.inside,
        baseline=tri.spec.baseline,
        rounds=[list(r.delays.as_tuple()) if r.delays is not None else None for r in rounds],
    )


def _calibrated_params(
    traces: list[GroundTruthTrace],
    n_values: list[int],
    spec: ParamsSpec,
    triangle_id: str,
) -> dict[int, CalibrationParams]:
    fixed = {n: CalibrationParams(epsilon_ms=spec.epsilon_ms, n=n, tau=spec.tau) for n in n_values}
    if not spec.calibrate:
        return fixed
    if not traces:
        logger.warning("CALIBRATION_SKIPPED: triangle=%s reason=no_ground_truth", triangle_id)
        return fixed

    kwargs: dict = {"mode": spec.epsilon_mode}
    if spec.calibration_epsilons is not None:
        kwargs["epsilons"] = spec.calibration_epsilons
    if spec.calibration_taus is not None:
        kwargs["taus"] = spec.calibration_taus
    chosen: dict[int, CalibrationParams] = {}
    for n in n_values:
        try:
            chosen[n] = calibrate(traces, iterations=(n,), **kwargs)
        except CalibrationFailed as exc:
            logger.warning("CALIBRATION_BEST_EFFORT: triangle=%s n=%s errors=%s", triangle_id, n, exc.best.errors)
            chosen[n] = exc.best.params or fixed[n]
        except CalibrationError as exc:
            logger.warning("CALIBRATION_SKIPPED: triangle=%s n=%s reason=%s", triangle_id, n, exc)
            chosen[n] = fixed[n]
    return chosen


def _node_record(
    tri: _Triangle,
    placement: _Placement,
    result: VerificationResult,
    params: CalibrationParams,
    access_type: AccessType,
    relayed_by: str | None = None,
    node_id: str | None = None,
) -> NodeRecord:
    return NodeRecord(
        node_id=node_id or placement.node_id,
        triangle_id=tri.source.triangle_id,
        true_inside=placement.inside,
        outcome=result.outcome.value,
        pass_count=result.iterations_passed,
        valid_count=result.iterations_valid,
        n=params.n,
        epsilon_ms=params.epsilon_ms,
        tau=params.tau,
        access_type=access_type.value,
        relayed_by=relayed_by,
        tampered_count=result.iterations_tampered,
    )


def _summary(kind: str, n: int | None, tally_: _Tally, reference: tuple[float, float] | None, seed: int) -> SummaryRecord:
    rates = evaluate_fa_fr(tally_.verdicts)
    return SummaryRecord(
        kind=kind,
        n=n,
        epsilon_ms=next(iter(tally_.epsilons)) if len(tally_.epsilons) == 1 else None,
        tau=next(iter(tally_.taus)) if len(tally_.taus) == 1 else None,
        false_accept_rate=rates.false_accept_rate,
        false_reject_rate=rates.false_reject_rate,
        false_accepts=rates.false_accepts,
        false_rejects=rates.false_rejects,
        inside_total=rates.inside_total,
        outside_total=rates.outside_total,
        indeterminate=rates.indeterminate,
        excluded=tally_.excluded,
        reference_fa_pct=reference[0] if reference else None,
        reference_fr_pct=reference[1] if reference else None,
        seed=seed,
    )


class _CpvRun:
    def __init__(self, config: ExperimentConfig, topology: SimTopology, triangles: list[TriangleSource]) -> None:
        self.config = config
        self.topology = topology
        self.triangles = triangles
        self.adversary = config.adversary.to_config()
        self.n_values = config.params.n_values()
        self.rounds = max(self.n_values)
        self.records: list[ReportRecord] = []
        self.honest = {n: _Tally() for n in self.n_values}
        self.relayed = {n: _Tally() for n in self.n_values}

    def _session(self, tri: _Triangle, client: str, session_id: str, leg: LegFn, **extra) -> SimMpSession:
        return SimMpSession(
            self.topology,
            tri.spec.verifier_ids,
            client,
            session_id=session_id,
            clocks=tri.clocks,
            clock_offsets_ms=self.config.clock_offsets_ms,
            adversary=self.adversary,
            leg=leg,
            puzzle_difficulty=self.config.puzzle_difficulty,
            client_hash_rate=self.config.client_hash_rate,
            solve_puzzles=self.config.solve_puzzles,
            **extra,
        )

    async def _rounds(self, session: SimMpSession) -> list[MpRound]:
        return await collect_rounds(
            session, self.rounds, interval_ms=self.config.interval_ms, timeout_ms=self.config.timeout_ms
        )

    def _verdict(self, tri: _Triangle, rounds: Sequence[MpRound], params: CalibrationParams) -> VerificationResult:
        if not baseline_is_fresh(tri.spec, 0.0, self.config.staleness_ms):
            return VerificationResult.indeterminate("stale_baseline")
        mode = self.config.params.epsilon_mode
        records = [judge_round(r, tri.spec.baseline, params.epsilon_ms, mode=mode) for r in rounds[: params.n]]
        return tally(records, params)

    def _score(self, bucket: dict[int, _Tally], inside: bool, result: VerificationResult, params: CalibrationParams) -> None:
        entry = bucket[params.n]
        entry.verdicts.append((inside, result))
        entry.epsilons.add(params.epsilon_ms)
        entry.taus.add(params.tau)

    def _wifi_topology(self, tri_placements: list[_Placement]) -> None:
        mode = self.config.wifi_clients
        if mode == "none":
            return
        wanted = [p.node_id for p in tri_placements if mode == "all" or p.inside]
        self.topology = self.topology.with_access(wanted, AccessType.WIFI)

    def _clients_of(self, source: TriangleSource) -> list[str]:
        if source.clients is not None:
            return list(source.clients)
        reserved = set(source.verifiers) | set(source.ground_truth) | {s.server_id for s in source.servers}
        adversary = self.config.adversary
        reserved |= {adversary.middlebox_node, adversary.client_true_node} - {None}  # type: ignore[arg-type]
        for other in self.triangles:
            reserved |= set(other.verifiers)
        return [node_id for node_id in self.topology.nodes if node_id not in reserved]

    async def run(self) -> list[ReportRecord]:
        prepared: list[tuple[_Triangle, list[_Placement], list[_Placement]]] = []
        leg = _make_leg(self.topology, self.adversary)
        for source in self.triangles:
            tri = _prepare_triangle(self.topology, source, leg, self.config)
            if isinstance(tri, str):
                logger.warning("TRIANGLE_SKIPPED: triangle=%s reason=%s", source.triangle_id, tri)
                self.records.append(SkippedRecord(triangle_id=source.triangle_id, reason=tri))
                continue
            gt = [tri.place(self.topology, n) for n in source.ground_truth]
            clients = [tri.place(self.topology, n) for n in self._clients_of(source)]
            prepared.append((tri, gt, clients))

        all_placements = [p for _, gt, clients in prepared for p in (*gt, *clients)]
        self._wifi_topology(all_placements)
        leg = _make_leg(self.topology, self.adversary)

        for tri, gt, clients in prepared:
            await self._run_triangle(tri, gt, clients, leg)

        reference_by_n = cfg.REFERENCE_CPV_BY_N
        wifi = self.config.wifi_clients != "none"
        for n in self.n_values:
            reference = cfg.REFERENCE_CPV_WIFI if wifi else reference_by_n.get(n)
            self.records.append(_summary("cpv", n, self.honest[n], reference, self.config.seed))
            if self.relayed[n].verdicts:
                self.records.append(_summary("cpv_relayed", n, self.relayed[n], None, self.config.seed))
        return self.records

    async def _run_triangle(self, tri: _Triangle, gt: list[_Placement], clients: list[_Placement], leg: LegFn) -> None:
        tid = tri.source.triangle_id
        traces: list[GroundTruthTrace] = []
        for placement in gt:
            rounds = await self._rounds(self._session(tri, placement.node_id, f"{tid}/{placement.node_id}", leg))
            traces.append(
                GroundTruthTrace(
                    node_id=placement.node_id,
                    inside=placement.inside,
                    baseline=tri.spec.baseline,
                    estimates=tuple(r.estimate for r in rounds),
                    triangle_id=tid,
                )
            )
            if self.config.record_traces:
                self.records.append(_trace_of(tri, placement, rounds))
        params_by_n = _calibrated_params(traces, self.n_values, self.config.params, tid)

        margin = self.config.margin_fraction
        for placement in clients:
            if placement.clearance < margin:
                for n in self.n_values:
                    self.honest[n].excluded += 1
                continue
            session = self._session(tri, placement.node_id, f"{tid}/{placement.node_id}", leg)
            rounds = await self._rounds(session)
            if self.config.record_traces:
                self.records.append(_trace_of(tri, placement, rounds))
            access = self.topology.node(placement.node_id).access_type
            for n in self.n_values:
                result = self._verdict(tri, rounds, params_by_n[n])
                self._score(self.honest, placement.inside, result, params_by_n[n])
                self.records.append(_node_record(tri, placement, result, params_by_n[n], access))

        await self._run_relayed(tri, params_by_n, leg)
        logger.info("TRIANGLE_DONE: triangle=%s clients=%s ground_truth=%s", tid, len(clients), len(gt))

    async def _run_relayed(self, tri: _Triangle, params_by_n: dict[int, CalibrationParams], leg: LegFn) -> None:
        adversary = self.adversary
        spec = self.config.adversary
        if adversary.kind is not AdversaryKind.MIDDLEBOX_RELAY:
            return
        if spec.triangle_id is not None and spec.triangle_id != tri.source.triangle_id:
            return
        if adversary.client_true_node is None:
            raise ExperimentError("middlebox relay needs the relayed client's true node")
        placement = tri.place(self.topology, adversary.client_true_node)

        trace: MiddleboxTrace | None = None
        if adversary.strategy is PuzzleStrategy.SOLVE_LOCALLY:
            trace = simulate_middlebox(
                adversary.relayed_clients,
                self.config.puzzle_difficulty,
                adversary.cores,
                adversary.core_hash_rate,
                self.rounds,
                self.config.interval_ms,
                seed=self.config.seed,
            )
        mb = adversary.middlebox_node
        for slot in range(adversary.relayed_clients):
            node_id = f"{placement.node_id}@{mb}#{slot}"
            session = self._session(
                tri,
                placement.node_id,
                f"{tri.source.triangle_id}/{node_id}",
                leg,
                relay_slot=slot,
                middlebox_trace=trace,
                msg_base=slot * self.rounds * 3,
            )
            rounds = await self._rounds(session)
            for n in self.n_values:
                result = self._verdict(tri, rounds, params_by_n[n])
                self._score(self.relayed, placement.inside, result, params_by_n[n])
                self.records.append(
                    _node_record(
                        tri, placement, result, params_by_n[n], AccessType.WIRED, relayed_by=mb, node_id=node_id
                    )
                )


# (triangle id, truthful, measurement)
_SlvCase = tuple[str, bool, SlvMeasurement]


def _holdout_split(cases: list[_SlvCase]) -> tuple[list[_SlvCase], list[_SlvCase]]:
    """Alternate cases between a calibration half and a scored half within each truth class."""
    fit: list[_SlvCase] = []
    held: list[_SlvCase] = []
    seen = {True: 0, False: 0}
    for case in cases:
        truthful = case[1]
        (fit if seen[truthful] % 2 == 0 else held).append(case)
        seen[truthful] += 1
    return fit, held


async def _run_slv(config: ExperimentConfig, topology: SimTopology, triangles: list[TriangleSource]) -> list[ReportRecord]:
    leg = _make_leg(topology, config.adversary.to_config())
    records: list[ReportRecord] = []
    cases: list[_SlvCase] = []
    base = ipaddress.ip_address(cfg.EXPERIMENT_SERVER_IP_BASE)
    servers: dict[IpAddress, str] = {}
    prober = SimProber(servers, leg)

    for source in triangles:
        if not source.servers:
            continue
        tri = _prepare_triangle(topology, source, leg, config)
        if isinstance(tri, str):
            logger.warning("TRIANGLE_SKIPPED: triangle=%s reason=%s", source.triangle_id, tri)
            records.append(SkippedRecord(triangle_id=source.triangle_id, reason=tri))
            continue
        sites = [VerifierSite(v, topology.node(v).location) for v in source.verifiers]
        a, b, c = source.verifiers
        x, y, z = tri.spec.baseline
        baselines = {pair_key(a, b): x, pair_key(b, c): y, pair_key(a, c): z}
        for case in source.servers:
            ip = base + len(servers) + 1
            servers[ip] = case.server_id
            request = SlvRequest(server_ip=ip, asserted_location=GeoPoint(lat=case.lat, lon=case.lon), domain=case.server_id)
            estimates = await probe_all(prober, sites, ip, samples_per_layer=config.slv_samples_per_layer)
            measurement = SlvMeasurement(
                request=request,
                verifiers=tuple(sites),
                server_owd_ms={v: e.owd_ms for v, e in estimates.items()},
                baseline_owd_ms=baselines,
            )
            cases.append((source.triangle_id, case.truthful, measurement))

    epsilon = config.slv_epsilon_ms
    scored = cases
    if config.calibrate_slv and cases:
        fit, scored = _holdout_split(cases)
        try:
            epsilon = calibrate_slv_epsilon([(t, m) for _, t, m in fit], rule=config.circle_rule)
        except CalibrationFailed as exc:
            logger.warning("SLV_CALIBRATION_FAILED: best_errors=%s", exc.best.errors)

    pins = PinStore()
    false_accepts = false_rejects = truthful_total = false_total = indeterminate = 0
    for triangle_id, truthful, m in scored:
        try:
            check = m.check(epsilon, rule=config.circle_rule, metric=topology.metric, origin=topology.origin)
        except SlvIndeterminate as exc:
            logger.info("SLV_INDETERMINATE: server=%s reason=%s", m.request.domain, exc)
            indeterminate += 1
            records.append(
                SlvRecord(
                    server_id=m.request.domain or "",
                    triangle_id=triangle_id,
                    truthful=truthful,
                    outcome=VerdictOutcome.INDETERMINATE.value,
                    epsilon_ms=epsilon,
                )
            )
            continue
        verdict = classify_verdict(
            m.request.domain, check.passed, pins, asserted=m.request.asserted_location, now_ms=0, pairs=check.pairs
        )
        truthful_total += int(truthful)
        false_total += int(not truthful)
        false_rejects += int(truthful and not check.passed)
        false_accepts += int(check.passed and not truthful)
        records.append(
            SlvRecord(
                server_id=m.request.domain or "",
                triangle_id=triangle_id,
                truthful=truthful,
                outcome=verdict.outcome.value,
                epsilon_ms=epsilon,
                covering_pairs=sum(1 for p in check.pairs if p.covers),
                passed=check.passed,
            )
        )

    ref_fa, ref_fr = cfg.REFERENCE_SLV
    records.append(
        SummaryRecord(
            kind="slv",
            epsilon_ms=epsilon,
            false_accept_rate=_rate(false_accepts, false_total),
            false_reject_rate=_rate(false_rejects, truthful_total),
            false_accepts=false_accepts,
            false_rejects=false_rejects,
            inside_total=truthful_total,
            outside_total=false_total,
            indeterminate=indeterminate,
            reference_fa_pct=ref_fa,
            reference_fr_pct=ref_fr,
            seed=config.seed,
        )
    )
    return records


async def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    topology, triangles = _build_topology(config)
    logger.info(
        "EXPERIMENT_START: kind=%s seed=%s nodes=%s triangles=%s",
        config.kind.value,
        config.seed,
        len(topology.nodes),
        len(triangles),
    )
    if config.kind is ExperimentKind.SLV:
        records = await _run_slv(config, topology, triangles)
    else:
        records = await _CpvRun(config, topology, triangles).run()
    report = ExperimentReport(seed=config.seed, records=records)
    for summary in report.of_type(SummaryRecord):
        logger.info(
            "EXPERIMENT_SUMMARY: kind=%s n=%s fa=%s fr=%s indeterminate=%s",
            summary.kind,
            summary.n,
            summary.false_accept_rate,
            summary.false_reject_rate,
            summary.indeterminate,
        )
    return report


def accepted_share(report: ExperimentReport, *, relayed: bool) -> float | None:
    """Share of scored node records that were accepted."""
    nodes = [r for r in report.of_type(NodeRecord) if (r.relayed_by is not None) == relayed]
    if not nodes:
        return None
    return sum(1 for r in nodes if r.outcome == Outcome.ACCEPTED.value) / len(nodes)


