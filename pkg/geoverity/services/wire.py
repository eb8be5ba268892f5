"""wire.py — authenticated frames between verifiers, clients and the Manager.

Frame layout (network byte order):

    version      u8     = 1
    msg_type     u8
    session_id   16 bytes
    seq          u32
    origin_id    u16
    sent_ts_ms   u64    ms since the Unix epoch
    payload_len  u16
    payload      payload_len bytes, msgpack
    mac          32 bytes, HMAC-SHA256 over everything above

No field of a frame is handed out before its MAC has been checked.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import struct
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any, Final

import msgspec

from geoverity.enums import MsgType, RequestKind, WireErrorCode
from geoverity.services.sessions import SessionGrant

logger = logging.getLogger(__name__)

WIRE_VERSION: Final[int] = 1
_HEADER: Final = struct.Struct("!BB16sIHQH")
HEADER_SIZE: Final[int] = _HEADER.size
MAC_SIZE: Final[int] = 32
MAX_PAYLOAD: Final[int] = 0xFFFF
SESSION_ID_BYTES: Final[int] = 16
NO_SESSION: Final[bytes] = bytes(SESSION_ID_BYTES)
# origin id every client uses; clients are told apart by session
CLIENT_ORIGIN: Final[int] = 0xFFFF

_API_TYPES: Final = frozenset({MsgType.VERIFY_REQUEST, MsgType.VERIFY_RESPONSE})


class WireError(RuntimeError):
    pass


class FrameError(WireError):
    def __init__(self, code: WireErrorCode, detail: str = "") -> None:
        self.code = code
        self.detail = detail
        super().__init__(f"{code.value}: {detail}" if detail else code.value)


@dataclass(frozen=True, slots=True)
class WireMessage:
    msg_type: MsgType
    session_id: bytes
    seq: int
    origin_id: int
    sent_ts_ms: int
    payload: bytes = b""
    version: int = WIRE_VERSION

    def __post_init__(self) -> None:
        if len(self.session_id) != SESSION_ID_BYTES:
            raise WireError(f"session id must be {SESSION_ID_BYTES} bytes")
        if not 0 <= self.seq <= 0xFFFF_FFFF:
            raise WireError(f"seq out of range: {self.seq}")
        if not 0 <= self.origin_id <= 0xFFFF:
            raise WireError(f"origin id out of range: {self.origin_id}")
        if not 0 <= self.sent_ts_ms <= 0xFFFF_FFFF_FFFF_FFFF:
            raise WireError(f"timestamp out of range: {self.sent_ts_ms}")
        if len(self.payload) > MAX_PAYLOAD:
            raise WireError(f"payload too large: {len(self.payload)}")

    def header(self) -> bytes:
        return _HEADER.pack(
            self.version,
            int(self.msg_type),
            self.session_id,
            self.seq,
            self.origin_id,
            self.sent_ts_ms,
            len(self.payload),
        )


# ─── Keys ─────────────────────────────────────────────────────────────────────


def derive_session_key(manager_key: bytes, session_id: bytes) -> bytes:
    """Client↔verifier key: HMAC-SHA256(K(manager, verifier), "session" ‖ session_id)."""
    return hmac.new(manager_key, b"session" + session_id, hashlib.sha256).digest()


class KeyRing:
    """Keys one node holds, looked up by the other party of a frame.

    For frames we send the other party is the destination, for frames we
    receive it is the origin.
    """

    def __init__(
        self,
        own_id: int,
        pairwise: Mapping[int, bytes],
        *,
        manager_id: int | None = None,
        api_key: bytes | None = None,
    ) -> None:
        self.own_id = own_id
        self.pairwise = dict(pairwise)
        self.manager_id = manager_id
        self.api_key = api_key
        self._sessions: dict[bytes, bytes] = {}

    def register_session(self, session_id: bytes, key: bytes) -> None:
        self._sessions[session_id] = key

    def forget_session(self, session_id: bytes) -> None:
        self._sessions.pop(session_id, None)

    def session_key(self, session_id: bytes) -> bytes:
        key = self._sessions.get(session_id)
        if key is not None:
            return key
        if self.manager_id is not None and self.manager_id in self.pairwise and session_id != NO_SESSION:
            return derive_session_key(self.pairwise[self.manager_id], session_id)
        raise FrameError(WireErrorCode.UNKNOWN_KEY, f"no key for session {session_id.hex()}")

    def for_peer(self, peer: int, msg_type: MsgType | int, session_id: bytes) -> bytes:
        if CLIENT_ORIGIN in (peer, self.own_id):
            if msg_type in _API_TYPES:
                if self.api_key is None:
                    raise FrameError(WireErrorCode.UNKNOWN_KEY, "no API key")
                return self.api_key
            return self.session_key(session_id)
        key = self.pairwise.get(peer)
        if key is None:
            raise FrameError(WireErrorCode.UNKNOWN_KEY, f"no key shared with {peer}")
        return key


# ─── Framing ──────────────────────────────────────────────────────────────────


def _msg_type(raw: int) -> MsgType:
    try:
        return MsgType(raw)
    except ValueError:
        raise FrameError(WireErrorCode.UNKNOWN_TYPE, f"{raw:#04x}") from None


def frame_encode(msg: WireMessage, key: bytes) -> bytes:
    body = msg.header() + msg.payload
    return body + hmac.new(key, body, hashlib.sha256).digest()


def frame_length(header: bytes) -> int:
    """Total frame size announced by a header; raises on short or foreign headers."""
    if len(header) < HEADER_SIZE:
        raise FrameError(WireErrorCode.TRUNCATED, f"{len(header)} header bytes")
    if header[0] != WIRE_VERSION:
        raise FrameError(WireErrorCode.BAD_VERSION, f"version {header[0]}")
    payload_len = int.from_bytes(header[HEADER_SIZE - 2 : HEADER_SIZE], "big")
    return HEADER_SIZE + payload_len + MAC_SIZE


def frame_decode(data: bytes, keys: KeyRing | bytes) -> WireMessage:
    """Checks, in order: length, version, declared length, key, MAC, message type."""
    if len(data) < HEADER_SIZE + MAC_SIZE:
        raise FrameError(WireErrorCode.TRUNCATED, f"{len(data)} bytes")
    expected = frame_length(data)
    if len(data) != expected:
        code = WireErrorCode.TRUNCATED if len(data) < expected else WireErrorCode.LENGTH_MISMATCH
        raise FrameError(code, f"{len(data)} bytes, header says {expected}")

    version, msg_type, session_id, seq, origin_id, sent_ts_ms, payload_len = _HEADER.unpack_from(data)
    key = keys if isinstance(keys, bytes) else keys.for_peer(origin_id, msg_type, session_id)
    body, mac = data[:-MAC_SIZE], data[-MAC_SIZE:]
    if not hmac.compare_digest(mac, hmac.new(key, body, hashlib.sha256).digest()):
        raise FrameError(WireErrorCode.MAC_FAIL, f"origin {origin_id} type {msg_type:#04x}")
    return WireMessage(
        msg_type=_msg_type(msg_type),
        session_id=session_id,
        seq=seq,
        origin_id=origin_id,
        sent_ts_ms=sent_ts_ms,
        payload=data[HEADER_SIZE : HEADER_SIZE + payload_len],
        version=version,
    )


def frame_peek(data: bytes) -> WireMessage:
    """Parse without authentication. Only for parties that forward frames they cannot check."""
    expected = frame_length(data)
    if len(data) != expected:
        raise FrameError(WireErrorCode.LENGTH_MISMATCH, f"{len(data)} bytes, header says {expected}")
    version, msg_type, session_id, seq, origin_id, sent_ts_ms, payload_len = _HEADER.unpack_from(data)
    return WireMessage(
        msg_type=_msg_type(msg_type),
        session_id=session_id,
        seq=seq,
        origin_id=origin_id,
        sent_ts_ms=sent_ts_ms,
        payload=data[HEADER_SIZE : HEADER_SIZE + payload_len],
        version=version,
    )


def binding_of(frame: bytes) -> bytes:
    """Puzzle binding of a timestamp frame: digest of its header."""
    return hashlib.sha256(frame[:HEADER_SIZE]).digest()


# ─── Payloads ─────────────────────────────────────────────────────────────────


class TimestampPayload(msgspec.Struct, kw_only=True):
    observer: int
    puzzle_nonce: bytes = b""
    difficulty: int = 0


class RelayPayload(msgspec.Struct, kw_only=True):
    inner: bytes
    solution: bytes = b""


class SessionInitPayload(msgspec.Struct, kw_only=True):
    grant: SessionGrant


class ProbePayload(msgspec.Struct, kw_only=True):
    """BASELINE_PROBE / OFFSET_PROBE; the reply fills t2 and t3 (peer clock)."""

    t1: float
    t2: float | None = None
    t3: float | None = None


class VerifyRequestPayload(msgspec.Struct, kw_only=True):
    request_id: str
    kind: RequestKind
    lat: float | None = None
    lon: float | None = None
    server_ip: str | None = None
    domain: str | None = None


class VerifierEndpoint(msgspec.Struct, kw_only=True):
    verifier_id: str
    wire_id: int
    host: str
    port: int
    session_key: bytes


class VerifyResponsePayload(msgspec.Struct, kw_only=True):
    request_id: str
    # "connect": attach to the listed verifiers; "verdict": final answer
    status: str
    grant: SessionGrant | None = None
    verifiers: list[VerifierEndpoint] = msgspec.field(default_factory=list)
    puzzle_difficulty: int = 0
    outcome: str | None = None
    verification_passed: bool | None = None
    pass_count: int | None = None
    valid_count: int | None = None
    n: int | None = None
    tampered_count: int | None = None
    reason: str | None = None


class TurnPayload(msgspec.Struct, kw_only=True):
    observers: list[int]
    difficulty: int = 0


class DelayReportPayload(msgspec.Struct, kw_only=True):
    origin: int
    observer: int
    send_ts: float = 0.0
    recv_ts: float = 0.0
    tampered: bool = False
    reason: str | None = None


class SessionReadyPayload(msgspec.Struct, kw_only=True):
    verifier: int


class StatusQueryPayload(msgspec.Struct, kw_only=True):
    pass


class PeerStatus(msgspec.Struct, kw_only=True):
    peer: int
    offset_ms: float
    baseline_ms: float | None = None
    measured_at_ms: float | None = None
    stale: bool = True


class StatusReportPayload(msgspec.Struct, kw_only=True):
    verifier: int
    now_ms: int
    peers: list[PeerStatus] = msgspec.field(default_factory=list)


class ProbeRequestPayload(msgspec.Struct, kw_only=True):
    request_id: str
    server_ip: str
    samples_per_layer: int


class ProbeSampleWire(msgspec.Struct, kw_only=True, array_like=True):
    layer: str
    rtt_ms: float
    timestamp_ms: float


class ProbeReportPayload(msgspec.Struct, kw_only=True):
    request_id: str
    samples: list[ProbeSampleWire] = msgspec.field(default_factory=list)
    error: str | None = None


PAYLOAD_TYPES: Final[dict[MsgType, type[msgspec.Struct]]] = {
    MsgType.TIMESTAMP: TimestampPayload,
    MsgType.RELAY: RelayPayload,
    MsgType.SESSION_INIT: SessionInitPayload,
    MsgType.BASELINE_PROBE: ProbePayload,
    MsgType.VERIFY_REQUEST: VerifyRequestPayload,
    MsgType.VERIFY_RESPONSE: VerifyResponsePayload,
    MsgType.OFFSET_PROBE: ProbePayload,
    MsgType.TURN: TurnPayload,
    MsgType.DELAY_REPORT: DelayReportPayload,
    MsgType.SESSION_READY: SessionReadyPayload,
    MsgType.STATUS_QUERY: StatusQueryPayload,
    MsgType.STATUS_REPORT: StatusReportPayload,
    MsgType.PROBE_REQUEST: ProbeRequestPayload,
    MsgType.PROBE_REPORT: ProbeReportPayload,
}

_ENC: Final = msgspec.msgpack.Encoder()
_DECODERS: Final = {kind: msgspec.msgpack.Decoder(t) for kind, t in PAYLOAD_TYPES.items()}


def encode_payload(payload: msgspec.Struct) -> bytes:
    return _ENC.encode(payload)


def decode_payload(msg: WireMessage) -> Any:
    """Payload Struct for ``msg.msg_type``."""
    try:
        return _DECODERS[msg.msg_type].decode(msg.payload)
    except msgspec.DecodeError as exc:
        raise FrameError(WireErrorCode.BAD_PAYLOAD, f"{msg.msg_type.name}: {exc}") from None


def seal(
    msg_type: MsgType,
    payload: msgspec.Struct,
    *,
    keys: KeyRing,
    peer: int,
    sent_ts_ms: int,
    session_id: bytes = NO_SESSION,
    seq: int = 0,
) -> bytes:
    """Encode and MAC a frame from ``keys.own_id`` to ``peer``."""
    msg = WireMessage(
        msg_type=msg_type,
        session_id=session_id,
        seq=seq,
        origin_id=keys.own_id,
        sent_ts_ms=sent_ts_ms,
        payload=encode_payload(payload),
    )
    return frame_encode(msg, keys.for_peer(peer, msg_type, session_id))


def open_frame(data: bytes, keys: KeyRing) -> tuple[WireMessage, Any]:
    msg = frame_decode(data, keys)
    return msg, decode_payload(msg)
