"""manager_server.py — the Manager daemon: client API, verifier links, health loop.

Clients connect to the Manager port and send VERIFY_REQUEST frames under the
API key. For CPV the Manager answers with a "connect" response (grant plus the
three verifiers and their session keys), drives the rounds through TURN frames
once all three verifiers report SESSION_READY, and finally sends a "verdict"
response. SLV probing is delegated to the selected verifiers.
"""

from __future__ import annotations

import asyncio
import ipaddress
import logging
from collections.abc import Mapping
from pathlib import Path

import msgspec

from geoverity.db.pins import PinStore
from geoverity.db.results import DuplicateResultError, ResultRecord, ResultsLog
from geoverity.enums import MsgType, Outcome, ProbeLayer, RequestKind, VerdictOutcome
from geoverity.services import config as cfg
from geoverity.services.clock import ClockSource
from geoverity.services.deployment import Deployment, KeyFile, VerifierEntry
from geoverity.services.geometry import GeoPoint, GeometryError, TriangleSpec
from geoverity.services.manager import (
    BaselineBook,
    ClientNotConnectedError,
    IpLocationTable,
    Manager,
    ManagerOptions,
    RegisteredVerifier,
    VerifierRegistry,
    health_from_status,
)
from geoverity.services.mp import RawRelay, RelayTamperedError
from geoverity.services.sessions import SessionGrant
from geoverity.services.slv import IpAddress, ProbeFailedError, ProbeSample, SlvRequest, VerifierSite
from geoverity.services.transport import FrameChannel, PendingReplies, StreamChannel, serve_streams
from geoverity.services.wire import (
    CLIENT_ORIGIN,
    NO_SESSION,
    DelayReportPayload,
    FrameError,
    KeyRing,
    ProbeReportPayload,
    ProbeRequestPayload,
    StatusQueryPayload,
    StatusReportPayload,
    TurnPayload,
    VerifierEndpoint,
    VerifyRequestPayload,
    VerifyResponsePayload,
    WireMessage,
    derive_session_key,
    open_frame,
    seal,
)

logger = logging.getLogger(__name__)

STATUS_TIMEOUT_S = 2.0
PROBE_TIMEOUT_S = 30.0


# ─── Verifier links ───────────────────────────────────────────────────────────


class VerifierLink:
    """The Manager's connection to one verifier; a reader task routes what comes back."""

    def __init__(self, entry: VerifierEntry, ring: KeyRing, clock: ClockSource, router: SessionRouter) -> None:
        self.entry = entry
        self._ring = ring
        self._clock = clock
        self._router = router
        self._channel: StreamChannel | None = None
        self._reader: asyncio.Task | None = None
        self._connect_lock = asyncio.Lock()
        self._status: PendingReplies[int] = PendingReplies()
        self._probes: PendingReplies[str] = PendingReplies()
        self._seq = 0

    async def _ensure(self) -> StreamChannel:
        async with self._connect_lock:
            if self._channel is None:
                self._channel = await StreamChannel.connect(self.entry.host, self.entry.port)
                self._reader = asyncio.create_task(self._read_loop(self._channel), name=f"link-{self.entry.verifier_id}")
                logger.info("VERIFIER_LINK_UP: verifier=%s", self.entry.verifier_id)
            return self._channel

    def _next_seq(self) -> int:
        self._seq = (self._seq + 1) & 0xFFFF_FFFF
        return self._seq

    async def send(
        self,
        msg_type: MsgType,
        payload: msgspec.Struct,
        *,
        session_id: bytes = NO_SESSION,
        seq: int = 0,
    ) -> None:
        channel = await self._ensure()
        frame = seal(
            msg_type,
            payload,
            keys=self._ring,
            peer=self.entry.wire_id,
            sent_ts_ms=self._clock.now_ms(),
            session_id=session_id,
            seq=seq,
        )
        await channel.send(frame)

    async def _read_loop(self, channel: StreamChannel) -> None:
        try:
            while True:
                data = await channel.recv()
                if data is None:
                    break
                try:
                    msg, payload = open_frame(data, self._ring)
                except FrameError as exc:
                    logger.warning("FRAME_REJECTED: verifier=%s code=%s", self.entry.verifier_id, exc.code.value)
                    continue
                if msg.origin_id != self.entry.wire_id:
                    continue
                match msg.msg_type:
                    case MsgType.STATUS_REPORT:
                        self._status.resolve(msg.seq, payload)
                    case MsgType.PROBE_REPORT:
                        self._probes.resolve(payload.request_id, payload)
                    case MsgType.SESSION_READY | MsgType.DELAY_REPORT:
                        self._router.deliver(self.entry.verifier_id, msg, payload)
        except FrameError as exc:
            logger.warning("VERIFIER_LINK_BROKEN: verifier=%s code=%s", self.entry.verifier_id, exc.code.value)
        finally:
            if self._channel is channel:
                self._channel = None
            self._status.fail_all(ConnectionError(f"link to {self.entry.verifier_id} closed"))
            self._probes.fail_all(ConnectionError(f"link to {self.entry.verifier_id} closed"))
            await channel.close()
            logger.warning("VERIFIER_LINK_DOWN: verifier=%s", self.entry.verifier_id)

    async def status(self, *, timeout_s: float = STATUS_TIMEOUT_S) -> StatusReportPayload:
        seq = self._next_seq()
        future = self._status.expect(seq)
        try:
            await self.send(MsgType.STATUS_QUERY, StatusQueryPayload(), seq=seq)
        except BaseException:
            self._status.discard(seq)
            raise
        return await self._status.wait(seq, future, timeout_s)

    async def probe(
        self,
        request_id: str,
        server_ip: IpAddress,
        samples_per_layer: int,
        *,
        timeout_s: float = PROBE_TIMEOUT_S,
    ) -> ProbeReportPayload:
        future = self._probes.expect(request_id)
        payload = ProbeRequestPayload(request_id=request_id, server_ip=str(server_ip), samples_per_layer=samples_per_layer)
        try:
            await self.send(MsgType.PROBE_REQUEST, payload, seq=self._next_seq())
        except BaseException:
            self._probes.discard(request_id)
            raise
        return await self._probes.wait(request_id, future, timeout_s)

    async def close(self) -> None:
        if self._reader is not None:
            self._reader.cancel()
        if self._channel is not None:
            await self._channel.close()
            self._channel = None


# ─── Remote MP session ────────────────────────────────────────────────────────


class RemoteMpSession:
    """MP turns driven over the verifier links; implements ``mp.MpSession``."""

    def __init__(
        self,
        session_id: bytes,
        triangle: TriangleSpec,
        links: Mapping[str, VerifierLink],
        *,
        corrections: Mapping[tuple[str, str], float],
        puzzle_difficulty: int = 0,
    ) -> None:
        self.raw_session_id = session_id
        self.session_id = session_id.hex()
        self.verifier_ids = triangle.verifier_ids
        self._links = {vid: links[vid] for vid in triangle.verifier_ids}
        self._wire = {vid: link.entry.wire_id for vid, link in self._links.items()}
        self._names = {wid: vid for vid, wid in self._wire.items()}
        self._corrections = dict(corrections)
        self.puzzle_difficulty = puzzle_difficulty
        self.attached: set[str] = set()
        self._all_attached = asyncio.Event()
        self._reports: asyncio.Queue[tuple[int, DelayReportPayload]] = asyncio.Queue()

    def deliver(self, verifier_id: str, msg: WireMessage, payload: msgspec.Struct) -> None:
        if verifier_id not in self._wire:
            return
        if msg.msg_type is MsgType.SESSION_READY:
            self.attached.add(verifier_id)
            if len(self.attached) == 3:
                self._all_attached.set()
        elif isinstance(payload, DelayReportPayload) and payload.observer == self._wire[verifier_id]:
            self._reports.put_nowait((msg.seq, payload))

    async def wait_attached(self, timeout_ms: float) -> None:
        try:
            await asyncio.wait_for(self._all_attached.wait(), timeout_ms / 1000.0)
        except asyncio.TimeoutError:
            raise ClientNotConnectedError(sorted(self.attached), self.verifier_ids) from None

    def offset_corrections(self) -> dict[tuple[str, str], float]:
        return dict(self._corrections)

    async def run_turn(self, seq: int, origin: str, *, timeout_ms: float) -> list[RawRelay]:
        origin_wire = self._wire[origin]
        observers = [self._wire[v] for v in self.verifier_ids if v != origin]
        turn = TurnPayload(observers=observers, difficulty=self.puzzle_difficulty)
        await self._links[origin].send(MsgType.TURN, turn, session_id=self.raw_session_id, seq=seq)

        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout_ms / 1000.0
        relays: dict[str, RawRelay] = {}
        while len(relays) < len(observers):
            remaining = deadline - loop.time()
            if remaining <= 0:
                break
            try:
                report_seq, report = await asyncio.wait_for(self._reports.get(), remaining)
            except asyncio.TimeoutError:
                break
            if report_seq != seq:
                continue
            observer = self._names[report.observer]
            if report.tampered:
                raise RelayTamperedError(origin, observer, report.reason or "tampered")
            if report.origin != origin_wire:
                continue
            relays[observer] = RawRelay(origin=origin, observer=observer, send_ts=report.send_ts, recv_ts=report.recv_ts)
        return list(relays.values())

    async def pause(self, ms: float) -> None:
        await asyncio.sleep(ms / 1000.0)


class SessionRouter:
    def __init__(self) -> None:
        self._sessions: dict[bytes, RemoteMpSession] = {}

    def add(self, session: RemoteMpSession) -> None:
        self._sessions[session.raw_session_id] = session

    def remove(self, session_id: bytes) -> None:
        self._sessions.pop(session_id, None)

    def deliver(self, verifier_id: str, msg: WireMessage, payload: msgspec.Struct) -> None:
        session = self._sessions.get(msg.session_id)
        if session is None:
            logger.debug("REPORT_NO_SESSION: verifier=%s session=%s", verifier_id, msg.session_id.hex())
            return
        session.deliver(verifier_id, msg, payload)


# ─── Prober and connector backed by the links ────────────────────────────────


class RemoteProber:
    """``slv.Prober`` that asks the verifier itself to probe."""

    def __init__(self, links: Mapping[str, VerifierLink]) -> None:
        self._links = links
        self._counter = 0

    async def probe(self, verifier: VerifierSite, server_ip: IpAddress, *, samples_per_layer: int) -> list[ProbeSample]:
        self._counter += 1
        request_id = f"{verifier.verifier_id}-{self._counter}"
        try:
            report = await self._links[verifier.verifier_id].probe(request_id, server_ip, samples_per_layer)
        except (ConnectionError, asyncio.TimeoutError, FrameError) as exc:
            raise ProbeFailedError(verifier.verifier_id, server_ip, type(exc).__name__) from exc
        if report.error:
            raise ProbeFailedError(verifier.verifier_id, server_ip, report.error)
        return [
            ProbeSample(ProbeLayer(s.layer), s.rtt_ms, verifier.verifier_id, s.timestamp_ms) for s in report.samples
        ]


class ChannelConnector:
    """``manager.ClientConnector`` for a client on a Manager API channel."""

    def __init__(self, server: ManagerServer, channel: FrameChannel) -> None:
        self._server = server
        self._channel = channel
        self.session: RemoteMpSession | None = None

    async def connect(
        self,
        request_id: str,
        grant: SessionGrant,
        triangle: TriangleSpec,
        *,
        timeout_ms: float,
    ) -> RemoteMpSession:
        server = self._server
        statuses = await server.collect_status(triangle.verifier_ids)
        session = RemoteMpSession(
            grant.session_id,
            triangle,
            server.links,
            corrections=server.corrections(triangle.verifier_ids, statuses),
            puzzle_difficulty=server.puzzle_difficulty,
        )
        server.router.add(session)
        self.session = session

        endpoints = []
        for vid in triangle.verifier_ids:
            entry = server.links[vid].entry
            endpoints.append(
                VerifierEndpoint(
                    verifier_id=vid,
                    wire_id=entry.wire_id,
                    host=entry.host,
                    port=entry.port,
                    session_key=derive_session_key(server.ring.pairwise[entry.wire_id], grant.session_id),
                )
            )
        response = VerifyResponsePayload(
            request_id=request_id,
            status="connect",
            grant=grant,
            verifiers=endpoints,
            puzzle_difficulty=server.puzzle_difficulty,
        )
        await server.respond(self._channel, response)
        await session.wait_attached(timeout_ms)
        return session


# ─── Manager server ───────────────────────────────────────────────────────────


class ManagerServer:
    def __init__(
        self,
        deployment: Deployment,
        keys: KeyFile,
        *,
        results_path: Path | None,
        pin_dir: Path | None,
        options: ManagerOptions | None = None,
        clock: ClockSource | None = None,
        ip_table: IpLocationTable | None = None,
        pin_repair: bool = False,
        puzzle_difficulty: int = 0,
    ) -> None:
        self.deployment = deployment
        self.wire_id = deployment.manager.wire_id
        self.ring = keys.ring_for(self.wire_id, manager_id=self.wire_id)
        self.clock = clock or ClockSource()
        self.router = SessionRouter()
        self.links = {
            v.verifier_id: VerifierLink(v, self.ring, self.clock, self.router) for v in deployment.verifiers
        }
        self._names = {v.wire_id: v.verifier_id for v in deployment.verifiers}
        self.ip_table = ip_table or IpLocationTable()
        self.puzzle_difficulty = puzzle_difficulty
        self.registry = VerifierRegistry(
            RegisteredVerifier(verifier_id=v.verifier_id, location=v.location, wire_id=v.wire_id)
            for v in deployment.verifiers
        )
        self.baselines = BaselineBook()
        self.manager = Manager(
            self.registry,
            self.baselines,
            keys.issuer(),
            results=ResultsLog(results_path),
            pins=PinStore(pin_dir, repair=pin_repair),
            prober=RemoteProber(self.links),
            options=options,
            clock=self.clock.now_ms,
        )
        self._tasks: set[asyncio.Task] = set()

    # ─── status and health ────────────────────────────────────────────────

    async def collect_status(self, verifier_ids: tuple[str, ...]) -> dict[str, StatusReportPayload]:
        results = await asyncio.gather(
            *(self.links[vid].status() for vid in verifier_ids), return_exceptions=True
        )
        statuses: dict[str, StatusReportPayload] = {}
        for vid, result in zip(verifier_ids, results, strict=True):
            if isinstance(result, BaseException):
                if not isinstance(result, (ConnectionError, OSError, asyncio.TimeoutError, FrameError)):
                    raise result
                logger.warning("STATUS_FAILED: verifier=%s reason=%s", vid, type(result).__name__)
                continue
            statuses[vid] = result
            for peer in result.peers:
                name = self._names.get(peer.peer)
                if name and peer.baseline_ms is not None and peer.measured_at_ms is not None and not peer.stale:
                    self.baselines.update(vid, name, peer.baseline_ms, peer.measured_at_ms)
        return statuses

    def corrections(
        self,
        verifier_ids: tuple[str, ...],
        statuses: Mapping[str, StatusReportPayload],
    ) -> dict[tuple[str, str], float]:
        """(origin, observer) -> observer's offset to origin."""
        out: dict[tuple[str, str], float] = {}
        for observer, status in statuses.items():
            for peer in status.peers:
                origin = self._names.get(peer.peer)
                if origin in verifier_ids and origin != observer:
                    out[(origin, observer)] = peer.offset_ms
        return out

    async def refresh_health(self) -> None:
        ids = tuple(v.verifier_id for v in self.registry)
        statuses = await self.collect_status(ids)
        for vid in ids:
            status = statuses.get(vid)
            fresh = None if status is None else [not p.stale for p in status.peers]
            self.registry.set_health(vid, health_from_status(fresh))

    async def _health_loop(self, period_s: float) -> None:
        logger.info("Registry prober started: period=%ss verifiers=%s", period_s, len(self.registry))
        while True:
            try:
                await self.refresh_health()
            except Exception:
                logger.exception("Registry refresh failed")
            await asyncio.sleep(period_s)

    # ─── client API ───────────────────────────────────────────────────────

    async def respond(self, channel: FrameChannel, response: VerifyResponsePayload) -> None:
        frame = seal(
            MsgType.VERIFY_RESPONSE,
            response,
            keys=self.ring,
            peer=CLIENT_ORIGIN,
            sent_ts_ms=self.clock.now_ms(),
        )
        await channel.send(frame)

    async def handle_client(self, channel: FrameChannel) -> None:
        while True:
            try:
                data = await channel.recv()
            except FrameError as exc:
                logger.warning("FRAME_REJECTED: client=%s code=%s closing", channel.name, exc.code.value)
                return
            if data is None:
                return
            try:
                msg, request = open_frame(data, self.ring)
            except FrameError as exc:
                logger.warning("FRAME_REJECTED: client=%s code=%s", channel.name, exc.code.value)
                continue
            if msg.msg_type is not MsgType.VERIFY_REQUEST:
                logger.debug("FRAME_IGNORED: client=%s type=%s", channel.name, msg.msg_type.name)
                continue
            task = asyncio.create_task(self.serve_request(channel, request), name=f"request-{request.request_id}")
            self._tasks.add(task)
            task.add_done_callback(self._tasks.discard)

    async def serve_request(self, channel: FrameChannel, request: VerifyRequestPayload) -> None:
        """Answer one VERIFY_REQUEST; every path ends in exactly one response frame."""
        logger.info("REQUEST_RECEIVED: request=%s kind=%s", request.request_id, request.kind.value)
        try:
            if request.kind is RequestKind.CPV:
                response = await self._serve_cpv(channel, request)
            else:
                response = await self._serve_slv(request)
        except DuplicateResultError:
            logger.warning("REQUEST_DUPLICATE: request=%s", request.request_id)
            response = VerifyResponsePayload(request_id=request.request_id, status="error", reason="duplicate_request_id")
        except Exception:
            logger.exception("Request failed: request=%s", request.request_id)
            response = VerifyResponsePayload(request_id=request.request_id, status="error", reason="internal_error")
        try:
            await self.respond(channel, response)
        except (ConnectionError, OSError):
            logger.warning("RESPONSE_LOST: request=%s", request.request_id)

    async def _serve_cpv(self, channel: FrameChannel, request: VerifyRequestPayload) -> VerifyResponsePayload:
        try:
            asserted = GeoPoint(lat=request.lat, lon=request.lon)  # type: ignore[arg-type]
        except (GeometryError, TypeError):
            return self._reject(request, RequestKind.CPV, "bad_asserted_location")

        connector = ChannelConnector(self, channel)
        try:
            result = await self.manager.handle_cpv_request(request.request_id, asserted, connector)
        finally:
            if connector.session is not None:
                self.router.remove(connector.session.raw_session_id)
        return VerifyResponsePayload(
            request_id=request.request_id,
            status="verdict",
            outcome=result.outcome.value,
            pass_count=result.iterations_passed,
            valid_count=result.iterations_valid,
            n=result.iterations_total,
            tampered_count=result.iterations_tampered or None,
            reason=result.reason,
        )

    async def _serve_slv(self, request: VerifyRequestPayload) -> VerifyResponsePayload:
        lat, lon = request.lat, request.lon
        try:
            if (lat is None or lon is None) and request.server_ip:
                located = self.ip_table.lookup(ipaddress.ip_address(request.server_ip))
                if located is not None:
                    lat, lon = located.lat, located.lon
            if lat is None or lon is None or not request.server_ip:
                return self._reject(request, RequestKind.SLV, "no_asserted_location")
            slv_request = SlvRequest.parse(request.server_ip, lat, lon, request.domain)
        except (ValueError, GeometryError):
            return self._reject(request, RequestKind.SLV, "bad_request")

        verdict = await self.manager.handle_slv_request(request.request_id, slv_request)
        return VerifyResponsePayload(
            request_id=request.request_id,
            status="verdict",
            outcome=verdict.outcome.value,
            verification_passed=None if verdict.outcome is VerdictOutcome.INDETERMINATE else verdict.verification_passed,
        )

    def _reject(self, request: VerifyRequestPayload, kind: RequestKind, reason: str) -> VerifyResponsePayload:
        outcome = Outcome.INDETERMINATE.value
        with self.manager.claim(request.request_id):
            self.manager.results.record(
                ResultRecord(
                    request_id=request.request_id,
                    kind=kind.value,
                    outcome=outcome,
                    recorded_at_ms=self.clock.now_ms(),
                    server_ip=request.server_ip,
                    domain=request.domain,
                    reason=reason,
                )
            )
        return VerifyResponsePayload(request_id=request.request_id, status="verdict", outcome=outcome, reason=reason)

    # ─── run ──────────────────────────────────────────────────────────────

    async def run(self, *, bind_host: str | None = None, health_period_s: float = cfg.REGISTRY_PROBE_PERIOD_S) -> None:
        entry = self.deployment.manager
        server = await serve_streams(self.handle_client, bind_host or entry.host, entry.port)
        health = asyncio.create_task(self._health_loop(health_period_s), name="registry-prober")
        logger.info("Manager started: wire_id=%s port=%s verifiers=%s", self.wire_id, entry.port, len(self.links))
        try:
            async with server:
                await server.serve_forever()
        finally:
            health.cancel()
            for task in list(self._tasks):
                task.cancel()
            for link in self.links.values():
                await link.close()
