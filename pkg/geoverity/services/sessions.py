"""sessions.py — signed session grants.

The Manager signs (session_id ‖ asserted lat/lon ‖ expiry) with Ed25519;
verifiers attach a client only when the signature checks out under the
Manager's public key and the grant has not expired.
"""

from __future__ import annotations

import logging
import secrets
import struct
from typing import Final

import msgspec
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from geoverity.services.geometry import GeoPoint

logger = logging.getLogger(__name__)

SESSION_TTL_MS: Final[int] = 120_000
_SIGNED_TAIL: Final = struct.Struct("!ddQ")


class SessionGrantError(RuntimeError):
    pass


class GrantSignatureError(SessionGrantError):
    pass


class GrantExpiredError(SessionGrantError):
    pass


class SessionGrant(msgspec.Struct, frozen=True, kw_only=True):
    session_id: bytes
    lat: float
    lon: float
    expiry_ms: int
    signature: bytes = b""

    @property
    def asserted(self) -> GeoPoint:
        return GeoPoint(lat=self.lat, lon=self.lon)

    def signed_bytes(self) -> bytes:
        return self.session_id + _SIGNED_TAIL.pack(self.lat, self.lon, self.expiry_ms)


def new_session_id() -> bytes:
    return secrets.token_bytes(16)


class SessionIssuer:
    def __init__(self, private_key: Ed25519PrivateKey, *, ttl_ms: int = SESSION_TTL_MS) -> None:
        self._key = private_key
        self.ttl_ms = ttl_ms

    @classmethod
    def from_seed(cls, seed: bytes, *, ttl_ms: int = SESSION_TTL_MS) -> SessionIssuer:
        return cls(Ed25519PrivateKey.from_private_bytes(seed), ttl_ms=ttl_ms)

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self._key.public_key()

    def issue(self, asserted: GeoPoint, now_ms: int, *, session_id: bytes | None = None) -> SessionGrant:
        unsigned = SessionGrant(
            session_id=session_id or new_session_id(),
            lat=asserted.lat,
            lon=asserted.lon,
            expiry_ms=now_ms + self.ttl_ms,
        )
        grant = msgspec.structs.replace(unsigned, signature=self._key.sign(unsigned.signed_bytes()))
        logger.info("SESSION_ISSUED: session=%s expiry=%s", grant.session_id.hex(), grant.expiry_ms)
        return grant


def load_public_key(raw: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(raw)


def verify_grant(grant: SessionGrant, public_key: Ed25519PublicKey, now_ms: int) -> GeoPoint:
    """Return the asserted location of a valid grant."""
    try:
        public_key.verify(grant.signature, grant.signed_bytes())
    except InvalidSignature:
        raise GrantSignatureError(f"bad issuer signature on session {grant.session_id.hex()}") from None
    if now_ms > grant.expiry_ms:
        raise GrantExpiredError(f"session {grant.session_id.hex()} expired at {grant.expiry_ms}")
    return grant.asserted
