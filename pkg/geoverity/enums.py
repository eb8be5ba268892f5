from __future__ import annotations

from enum import Enum, IntEnum


class StringEnum(str, Enum):
    pass


class Outcome(StringEnum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    INDETERMINATE = "indeterminate"


class IterationOutcome(StringEnum):
    PASS = "pass"
    FAIL = "fail"
    INVALID = "invalid"


class RoundStatus(StringEnum):
    COMPLETE = "complete"
    INCOMPLETE = "incomplete"
    TAMPERED = "tampered"


class EpsilonMode(StringEnum):
    PER_SIDE = "per_side"
    RAW_AREA = "raw_area"


class CircleRule(StringEnum):
    RIGHT_ANGLE = "right_angle"
    SUM = "sum"


class DistanceMetric(StringEnum):
    GREAT_CIRCLE = "great_circle"
    PLANAR = "planar"


class AccessType(StringEnum):
    WIRED = "wired"
    WIFI = "wifi"


class JitterKind(StringEnum):
    NONE = "none"
    EXPONENTIAL = "exponential"
    LOGNORMAL = "lognormal"


class AdversaryKind(StringEnum):
    NONE = "none"
    DELAY_INFLATE = "delay_inflate"
    MIDDLEBOX_RELAY = "middlebox_relay"


class PuzzleStrategy(StringEnum):
    SOLVE_LOCALLY = "solve_locally"
    FORWARD_TO_CLIENT = "forward_to_client"


class ProbeLayer(StringEnum):
    TCP_HANDSHAKE = "tcp_handshake"
    HTTP_REQUEST_RESPONSE = "http_request_response"


class VerdictOutcome(StringEnum):
    CRITICAL = "critical"
    SUSPICIOUS = "suspicious"
    UNSUSPICIOUS = "unsuspicious"
    VERIFIED_PINNED = "verified_pinned"
    INDETERMINATE = "indeterminate"


class VerifierHealth(StringEnum):
    OK = "ok"
    DEGRADED = "degraded"
    DOWN = "down"


class ExperimentKind(StringEnum):
    CPV = "cpv"
    SLV = "slv"


class RequestKind(StringEnum):
    CPV = "cpv"
    SLV = "slv"


class WireErrorCode(StringEnum):
    MAC_FAIL = "mac_fail"
    TRUNCATED = "truncated"
    BAD_VERSION = "bad_version"
    LENGTH_MISMATCH = "length_mismatch"
    UNKNOWN_KEY = "unknown_key"
    UNKNOWN_TYPE = "unknown_type"
    BAD_PAYLOAD = "bad_payload"


class MsgType(IntEnum):
    TIMESTAMP = 0x01
    RELAY = 0x02
    SESSION_INIT = 0x03
    BASELINE_PROBE = 0x04
    VERIFY_REQUEST = 0x05
    VERIFY_RESPONSE = 0x06
    OFFSET_PROBE = 0x07
    TURN = 0x08
    DELAY_REPORT = 0x09
    SESSION_READY = 0x0A
    STATUS_QUERY = 0x0B
    STATUS_REPORT = 0x0C
    PROBE_REQUEST = 0x0D
    PROBE_REPORT = 0x0E
