"""verifier.py — the verifier daemon.

A verifier listens for three kinds of parties on one port:
  * the Manager: TURN, STATUS_QUERY and PROBE_REQUEST frames; reports go back on
    the same connection
  * peer verifiers: BASELINE_PROBE / OFFSET_PROBE exchanges, answered with t2/t3
  * clients: SESSION_INIT with a signed grant, then RELAY frames carrying the
    timestamps other verifiers issued

Peer probing runs in the background through ``clock.start_sync_workers``.
"""

from __future__ import annotations

import asyncio
import contextlib
import ipaddress
import logging
import secrets
from collections.abc import Mapping
from dataclasses import dataclass

import msgspec
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from geoverity.enums import MsgType
from geoverity.services import config as cfg
from geoverity.services.clock import ClockSource, ClockSyncState, FourStamps, start_sync_workers
from geoverity.services.deployment import Deployment, KeyFile, VerifierEntry
from geoverity.services.puzzle import PuzzleError, PuzzleSpec, puzzle_verify
from geoverity.services.sessions import SessionGrant, SessionGrantError, verify_grant
from geoverity.services.slv import ProbeFailedError, Prober
from geoverity.services.transport import FrameChannel, StreamChannel, serve_streams, serve_websocket
from geoverity.services.wire import (
    CLIENT_ORIGIN,
    DelayReportPayload,
    FrameError,
    KeyRing,
    PeerStatus,
    ProbePayload,
    ProbeReportPayload,
    ProbeRequestPayload,
    ProbeSampleWire,
    SessionReadyPayload,
    StatusReportPayload,
    TimestampPayload,
    WireMessage,
    binding_of,
    decode_payload,
    frame_decode,
    frame_peek,
    open_frame,
    seal,
)

logger = logging.getLogger(__name__)


class RelayRejected(Exception):
    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(reason)


# ─── Peer links ───────────────────────────────────────────────────────────────


class PeerProbeLink:
    """Outbound timestamp exchanges with one peer verifier."""

    def __init__(
        self,
        peer: VerifierEntry,
        ring: KeyRing,
        clock: ClockSource,
        *,
        msg_type: MsgType = MsgType.BASELINE_PROBE,
    ) -> None:
        self.peer_id = peer.verifier_id
        self._peer = peer
        self._ring = ring
        self._clock = clock
        self._msg_type = msg_type
        self._channel: StreamChannel | None = None
        self._lock = asyncio.Lock()
        self._seq = 0

    async def exchange(self, *, timeout_s: float) -> FourStamps:
        async with self._lock:
            try:
                return await asyncio.wait_for(self._exchange(), timeout_s)
            except FrameError as exc:
                await self.close()
                raise ConnectionError(str(exc)) from exc
            except (asyncio.TimeoutError, OSError):
                await self.close()
                raise

    async def _exchange(self) -> FourStamps:
        if self._channel is None:
            self._channel = await StreamChannel.connect(self._peer.host, self._peer.port)
        self._seq = (self._seq + 1) & 0xFFFF_FFFF
        t1 = self._clock.now_ms()
        frame = seal(
            self._msg_type,
            ProbePayload(t1=t1),
            keys=self._ring,
            peer=self._peer.wire_id,
            sent_ts_ms=t1,
            seq=self._seq,
        )
        await self._channel.send(frame)
        while True:
            data = await self._channel.recv()
            if data is None:
                raise ConnectionError(f"peer {self.peer_id} closed the connection")
            t4 = self._clock.now_ms()
            msg, reply = open_frame(data, self._ring)
            if msg.seq != self._seq or msg.origin_id != self._peer.wire_id or reply.t2 is None:
                continue
            return float(t1), reply.t2, reply.t3, float(t4)

    async def close(self) -> None:
        if self._channel is not None:
            channel, self._channel = self._channel, None
            await channel.close()


# ─── Verifier ─────────────────────────────────────────────────────────────────


@dataclass(slots=True)
class _Attached:
    channel: FrameChannel
    grant: SessionGrant


class VerifierNode:
    def __init__(
        self,
        entry: VerifierEntry,
        deployment: Deployment,
        keys: KeyFile,
        *,
        prober: Prober,
        clock: ClockSource | None = None,
        window: int = cfg.BASELINE_WINDOW,
        static_offsets: Mapping[str, float] | None = None,
        staleness_ms: float = cfg.BASELINE_STALENESS_MS,
        grant_key: Ed25519PublicKey | None = None,
    ) -> None:
        self.entry = entry
        self.wire_id = entry.wire_id
        self.manager_id = deployment.manager.wire_id
        self.ring = keys.ring_for(entry.wire_id, manager_id=self.manager_id)
        self.grant_key = grant_key or keys.grant_key()
        self.prober = prober
        self.clock = clock or ClockSource()
        self.staleness_ms = staleness_ms
        self.peers = [v for v in deployment.verifiers if v.verifier_id != entry.verifier_id]
        self._names = {v.wire_id: v.verifier_id for v in deployment.verifiers}
        self.sync = ClockSyncState(
            entry.verifier_id,
            [p.verifier_id for p in self.peers],
            window=window,
            static_offsets=static_offsets,
        )
        self._sessions: dict[bytes, _Attached] = {}
        self._manager: FrameChannel | None = None
        self._tasks: set[asyncio.Task] = set()

    # ─── connection handling ──────────────────────────────────────────────

    async def handle_channel(self, channel: FrameChannel) -> None:
        try:
            while True:
                try:
                    data = await channel.recv()
                except FrameError as exc:
                    logger.warning("FRAME_REJECTED: channel=%s code=%s closing", channel.name, exc.code.value)
                    return
                if data is None:
                    return
                received_ms = self.clock.now_ms()
                try:
                    msg = frame_decode(data, self.ring)
                    await self.dispatch(channel, msg, received_ms)
                except FrameError as exc:
                    logger.warning("FRAME_REJECTED: channel=%s code=%s", channel.name, exc.code.value)
        finally:
            for sid in [sid for sid, att in self._sessions.items() if att.channel is channel]:
                self._sessions.pop(sid, None)
                logger.info("SESSION_DETACHED: verifier=%s session=%s", self.entry.verifier_id, sid.hex())
            if self._manager is channel:
                self._manager = None

    async def dispatch(self, channel: FrameChannel, msg: WireMessage, received_ms: int) -> None:
        if msg.origin_id == self.manager_id:
            self._manager = channel
        match msg.msg_type:
            case MsgType.BASELINE_PROBE | MsgType.OFFSET_PROBE if msg.origin_id in self._names:
                await self._answer_probe(channel, msg, received_ms)
            case MsgType.TURN if msg.origin_id == self.manager_id:
                await self._emit_timestamps(msg)
            case MsgType.STATUS_QUERY if msg.origin_id == self.manager_id:
                await self._report_status(channel, msg)
            case MsgType.PROBE_REQUEST if msg.origin_id == self.manager_id:
                task = asyncio.create_task(self._probe(channel, msg), name=f"probe-{msg.seq}")
                self._tasks.add(task)
                task.add_done_callback(self._tasks.discard)
            case MsgType.SESSION_INIT if msg.origin_id == CLIENT_ORIGIN:
                await self._attach(channel, msg)
            case MsgType.RELAY if msg.origin_id == CLIENT_ORIGIN:
                await self._relay(msg, received_ms)
            case _:
                logger.debug("FRAME_IGNORED: type=%s origin=%s", msg.msg_type.name, msg.origin_id)

    async def _send_manager(self, msg_type: MsgType, payload: msgspec.Struct, *, session_id: bytes, seq: int) -> None:
        if self._manager is None:
            logger.warning("NO_MANAGER: dropped=%s session=%s seq=%s", msg_type.name, session_id.hex(), seq)
            return
        frame = seal(
            msg_type,
            payload,
            keys=self.ring,
            peer=self.manager_id,
            sent_ts_ms=self.clock.now_ms(),
            session_id=session_id,
            seq=seq,
        )
        await self._manager.send(frame)

    async def _answer_probe(self, channel: FrameChannel, msg: WireMessage, received_ms: int) -> None:
        probe = decode_payload(msg)
        if probe.t2 is not None:
            return
        t3 = self.clock.now_ms()
        reply = ProbePayload(t1=probe.t1, t2=float(received_ms), t3=float(t3))
        await channel.send(
            seal(msg.msg_type, reply, keys=self.ring, peer=msg.origin_id, sent_ts_ms=t3, seq=msg.seq)
        )

    # ─── MP turns ─────────────────────────────────────────────────────────

    async def _emit_timestamps(self, msg: WireMessage) -> None:
        attached = self._sessions.get(msg.session_id)
        if attached is None:
            logger.warning("TURN_NO_CLIENT: verifier=%s session=%s seq=%s", self.entry.verifier_id, msg.session_id.hex(), msg.seq)
            return
        turn = decode_payload(msg)
        for observer in turn.observers:
            if observer not in self._names or observer == self.wire_id:
                continue
            nonce = secrets.token_bytes(cfg.PUZZLE_NONCE_BYTES) if turn.difficulty else b""
            stamp = TimestampPayload(observer=observer, puzzle_nonce=nonce, difficulty=turn.difficulty)
            frame = seal(
                MsgType.TIMESTAMP,
                stamp,
                keys=self.ring,
                peer=observer,
                sent_ts_ms=self.clock.now_ms(),
                session_id=msg.session_id,
                seq=msg.seq,
            )
            await attached.channel.send(frame)

    def _check_stamp(self, relay_msg: WireMessage, inner_frame: bytes, solution: bytes) -> WireMessage:
        inner = frame_decode(inner_frame, self.ring)
        if inner.msg_type is not MsgType.TIMESTAMP:
            raise RelayRejected(f"relayed {inner.msg_type.name}")
        if inner.origin_id not in self._names or inner.origin_id == self.wire_id:
            raise RelayRejected(f"origin {inner.origin_id}")
        if inner.session_id != relay_msg.session_id:
            raise RelayRejected("session mismatch")
        stamp = decode_payload(inner)
        if stamp.observer != self.wire_id:
            raise RelayRejected(f"meant for {stamp.observer}")
        if stamp.difficulty:
            try:
                spec = PuzzleSpec(nonce=stamp.puzzle_nonce, difficulty=stamp.difficulty, binding=binding_of(inner_frame))
            except PuzzleError as exc:
                raise RelayRejected(str(exc)) from None
            if not puzzle_verify(spec, solution):
                raise RelayRejected("puzzle")
        return inner

    async def _relay(self, msg: WireMessage, received_ms: int) -> None:
        if msg.session_id not in self._sessions:
            logger.warning("RELAY_NO_SESSION: verifier=%s session=%s", self.entry.verifier_id, msg.session_id.hex())
            return
        relay = decode_payload(msg)
        try:
            inner = self._check_stamp(msg, relay.inner, relay.solution)
        except (FrameError, RelayRejected) as exc:
            reason = exc.code.value if isinstance(exc, FrameError) else exc.reason
            try:
                origin = frame_peek(relay.inner).origin_id
            except FrameError:
                origin = 0
            logger.warning(
                "RELAY_TAMPERED: verifier=%s session=%s seq=%s origin=%s reason=%s",
                self.entry.verifier_id,
                msg.session_id.hex(),
                msg.seq,
                origin,
                reason,
            )
            report = DelayReportPayload(origin=origin, observer=self.wire_id, tampered=True, reason=reason)
            await self._send_manager(MsgType.DELAY_REPORT, report, session_id=msg.session_id, seq=msg.seq)
            return

        report = DelayReportPayload(
            origin=inner.origin_id,
            observer=self.wire_id,
            send_ts=float(inner.sent_ts_ms),
            recv_ts=float(received_ms),
        )
        await self._send_manager(MsgType.DELAY_REPORT, report, session_id=msg.session_id, seq=inner.seq)

    async def _attach(self, channel: FrameChannel, msg: WireMessage) -> None:
        init = decode_payload(msg)
        if init.grant.session_id != msg.session_id:
            logger.warning("SESSION_REJECTED: session=%s reason=session_mismatch", msg.session_id.hex())
            return
        try:
            verify_grant(init.grant, self.grant_key, self.clock.now_ms())
        except SessionGrantError as exc:
            logger.warning("SESSION_REJECTED: session=%s reason=%s", msg.session_id.hex(), exc)
            return
        self._sessions[msg.session_id] = _Attached(channel=channel, grant=init.grant)
        logger.info("SESSION_ATTACHED: verifier=%s session=%s", self.entry.verifier_id, msg.session_id.hex())
        await self._send_manager(
            MsgType.SESSION_READY,
            SessionReadyPayload(verifier=self.wire_id),
            session_id=msg.session_id,
            seq=0,
        )

    # ─── Manager requests ─────────────────────────────────────────────────

    def status(self) -> StatusReportPayload:
        now = self.clock.now_ms()
        wire_ids = {name: wid for wid, name in self._names.items()}
        peers = []
        for name, sync in self.sync.peers.items():
            peers.append(
                PeerStatus(
                    peer=wire_ids[name],
                    offset_ms=sync.offset_ms,
                    baseline_ms=sync.baseline.value,
                    measured_at_ms=sync.baseline.measured_at_ms,
                    stale=not sync.baseline.is_fresh(now, self.staleness_ms),
                )
            )
        return StatusReportPayload(verifier=self.wire_id, now_ms=now, peers=peers)

    async def _report_status(self, channel: FrameChannel, msg: WireMessage) -> None:
        frame = seal(
            MsgType.STATUS_REPORT,
            self.status(),
            keys=self.ring,
            peer=self.manager_id,
            sent_ts_ms=self.clock.now_ms(),
            seq=msg.seq,
        )
        await channel.send(frame)

    async def _probe(self, channel: FrameChannel, msg: WireMessage) -> None:
        request: ProbeRequestPayload = decode_payload(msg)
        try:
            ip = ipaddress.ip_address(request.server_ip)
            samples = await self.prober.probe(self.entry.site, ip, samples_per_layer=request.samples_per_layer)
            report = ProbeReportPayload(
                request_id=request.request_id,
                samples=[
                    ProbeSampleWire(layer=s.layer.value, rtt_ms=s.rtt_ms, timestamp_ms=s.timestamp_ms)
                    for s in samples
                ],
            )
        except (ProbeFailedError, OSError, asyncio.TimeoutError, ValueError) as exc:
            logger.warning("PROBE_FAILED: verifier=%s server=%s reason=%s", self.entry.verifier_id, request.server_ip, exc)
            report = ProbeReportPayload(request_id=request.request_id, error=str(exc) or type(exc).__name__)
        frame = seal(
            MsgType.PROBE_REPORT,
            report,
            keys=self.ring,
            peer=self.manager_id,
            sent_ts_ms=self.clock.now_ms(),
            seq=msg.seq,
        )
        try:
            await channel.send(frame)
        except (ConnectionError, OSError):
            logger.warning("PROBE_REPORT_LOST: verifier=%s request=%s", self.entry.verifier_id, request.request_id)

    # ─── Run ──────────────────────────────────────────────────────────────

    async def run(
        self,
        *,
        bind_host: str | None = None,
        baseline_period_s: float = cfg.BASELINE_PERIOD_S,
        offset_period_s: float = cfg.OFFSET_PERIOD_S,
    ) -> None:
        host = bind_host or self.entry.host
        server = await serve_streams(self.handle_channel, host, self.entry.port)
        ws_runner = None
        if self.entry.ws_port:
            ws_runner = await serve_websocket(self.handle_channel, host, self.entry.ws_port)

        links = [PeerProbeLink(p, self.ring, self.clock) for p in self.peers]
        offset_links = [PeerProbeLink(p, self.ring, self.clock, msg_type=MsgType.OFFSET_PROBE) for p in self.peers]
        workers = start_sync_workers(
            self.sync,
            links,
            self.clock,
            baseline_period_s=baseline_period_s,
            offset_period_s=offset_period_s,
            offset_links=offset_links,
        )
        logger.info(
            "Verifier started: id=%s wire_id=%s port=%s peers=%s",
            self.entry.verifier_id,
            self.wire_id,
            self.entry.port,
            len(self.peers),
        )
        try:
            async with server:
                await server.serve_forever()
        finally:
            for task in [*workers, *self._tasks]:
                task.cancel()
            for link in [*links, *offset_links]:
                with contextlib.suppress(Exception):
                    await link.close()
            if ws_runner is not None:
                await ws_runner.cleanup()
