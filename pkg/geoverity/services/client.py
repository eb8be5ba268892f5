"""client.py — reference client playing the browser's part in real mode.

It asks the Manager for a verification, attaches to the three verifiers it is
sent to, and relays every timestamp it receives to the verifier named as its
observer, solving the attached puzzle first.
"""

from __future__ import annotations

import asyncio
import contextlib
import logging
import uuid

import msgspec

from geoverity.enums import MsgType, RequestKind
from geoverity.services.clock import ClockSource
from geoverity.services.puzzle import PuzzleSpec, puzzle_solve
from geoverity.services.transport import StreamChannel
from geoverity.services.wire import (
    CLIENT_ORIGIN,
    NO_SESSION,
    FrameError,
    RelayPayload,
    SessionInitPayload,
    VerifierEndpoint,
    VerifyRequestPayload,
    VerifyResponsePayload,
    WireMessage,
    binding_of,
    decode_payload,
    encode_payload,
    frame_decode,
    frame_encode,
    frame_peek,
)

logger = logging.getLogger(__name__)


class ClientError(RuntimeError):
    pass


def _frame(
    msg_type: MsgType,
    payload: msgspec.Struct,
    key: bytes,
    *,
    now_ms: int,
    session_id: bytes = NO_SESSION,
    seq: int = 0,
) -> bytes:
    msg = WireMessage(
        msg_type=msg_type,
        session_id=session_id,
        seq=seq,
        origin_id=CLIENT_ORIGIN,
        sent_ts_ms=now_ms,
        payload=encode_payload(payload),
    )
    return frame_encode(msg, key)


class _Attachment:
    def __init__(self, endpoint: VerifierEndpoint, channel: StreamChannel) -> None:
        self.endpoint = endpoint
        self.channel = channel


class ReferenceClient:
    def __init__(
        self,
        manager_host: str,
        manager_port: int,
        api_key: bytes,
        *,
        clock: ClockSource | None = None,
    ) -> None:
        self.manager_host = manager_host
        self.manager_port = manager_port
        self.api_key = api_key
        self.clock = clock or ClockSource()
        self.relayed = 0

    async def verify_cpv(self, lat: float, lon: float, *, request_id: str | None = None, timeout_s: float = 120.0) -> VerifyResponsePayload:
        request = VerifyRequestPayload(request_id=request_id or uuid.uuid4().hex, kind=RequestKind.CPV, lat=lat, lon=lon)
        return await asyncio.wait_for(self._run(request), timeout_s)

    async def verify_slv(
        self,
        server_ip: str,
        *,
        lat: float | None = None,
        lon: float | None = None,
        domain: str | None = None,
        request_id: str | None = None,
        timeout_s: float = 60.0,
    ) -> VerifyResponsePayload:
        request = VerifyRequestPayload(
            request_id=request_id or uuid.uuid4().hex,
            kind=RequestKind.SLV,
            lat=lat,
            lon=lon,
            server_ip=server_ip,
            domain=domain,
        )
        return await asyncio.wait_for(self._run(request), timeout_s)

    async def _run(self, request: VerifyRequestPayload) -> VerifyResponsePayload:
        manager = await StreamChannel.connect(self.manager_host, self.manager_port)
        relays: list[asyncio.Task] = []
        attachments: list[_Attachment] = []
        try:
            await manager.send(_frame(MsgType.VERIFY_REQUEST, request, self.api_key, now_ms=self.clock.now_ms()))
            while True:
                data = await manager.recv()
                if data is None:
                    raise ClientError("manager closed the connection")
                msg = frame_decode(data, self.api_key)
                if msg.msg_type is not MsgType.VERIFY_RESPONSE:
                    continue
                response: VerifyResponsePayload = decode_payload(msg)
                if response.request_id != request.request_id:
                    continue
                if response.status != "connect":
                    logger.info(
                        "CLIENT_RESULT: request=%s outcome=%s reason=%s relayed=%s",
                        response.request_id,
                        response.outcome,
                        response.reason,
                        self.relayed,
                    )
                    return response
                attachments = await self._attach(response)
                relays = [
                    asyncio.create_task(self._relay_loop(att, attachments), name=f"relay-{att.endpoint.verifier_id}")
                    for att in attachments
                ]
        finally:
            for task in relays:
                task.cancel()
            for att in attachments:
                with contextlib.suppress(Exception):
                    await att.channel.close()
            await manager.close()

    async def _attach(self, response: VerifyResponsePayload) -> list[_Attachment]:
        if response.grant is None or len(response.verifiers) != 3:
            raise ClientError("connect response without grant or verifiers")
        session_id = response.grant.session_id
        attachments = []
        for endpoint in response.verifiers:
            channel = await StreamChannel.connect(endpoint.host, endpoint.port)
            init = _frame(
                MsgType.SESSION_INIT,
                SessionInitPayload(grant=response.grant),
                endpoint.session_key,
                now_ms=self.clock.now_ms(),
                session_id=session_id,
            )
            await channel.send(init)
            attachments.append(_Attachment(endpoint, channel))
            logger.info("CLIENT_ATTACHED: verifier=%s session=%s", endpoint.verifier_id, session_id.hex())
        return attachments

    async def _relay_loop(self, source: _Attachment, attachments: list[_Attachment]) -> None:
        by_wire = {att.endpoint.wire_id: att for att in attachments}
        while True:
            data = await source.channel.recv()
            if data is None:
                return
            try:
                stamp_msg = frame_peek(data)
            except FrameError as exc:
                logger.warning("CLIENT_BAD_FRAME: verifier=%s code=%s", source.endpoint.verifier_id, exc.code.value)
                continue
            if stamp_msg.msg_type is not MsgType.TIMESTAMP:
                continue
            target = by_wire.get(decode_payload(stamp_msg).observer)
            if target is None:
                continue
            await self.forward_stamp(data, target)

    async def forward_stamp(self, frame: bytes, target: _Attachment) -> None:
        """Solve the stamp's puzzle if it has one and relay the frame to its observer."""
        stamp_msg = frame_peek(frame)
        stamp = decode_payload(stamp_msg)
        solution = b""
        if stamp.difficulty:
            spec = PuzzleSpec(nonce=stamp.puzzle_nonce, difficulty=stamp.difficulty, binding=binding_of(frame))
            solution = (await asyncio.to_thread(puzzle_solve, spec)).solution
        relay = _frame(
            MsgType.RELAY,
            RelayPayload(inner=frame, solution=solution),
            target.endpoint.session_key,
            now_ms=self.clock.now_ms(),
            session_id=stamp_msg.session_id,
            seq=stamp_msg.seq,
        )
        await target.channel.send(relay)
        self.relayed += 1
