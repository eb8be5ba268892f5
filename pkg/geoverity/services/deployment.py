"""deployment.py — who runs where, and which keys they share.

Deployment file (JSON):

    {"manager": {"wire_id": 0, "host": "10.0.0.1", "port": 7400},
     "verifiers": [{"verifier_id": "ottawa", "wire_id": 1, "lat": 45.42, "lon": -75.69,
                    "host": "10.0.0.2", "port": 7401, "ws_port": 7501}, ...]}

Key file (JSON, hex strings):

    {"api_key": "...", "manager_public_key": "...", "manager_signing_seed": "...",
     "pairs": [{"a": 0, "b": 1, "key": "..."}, ...]}

Verifiers get key files without ``manager_signing_seed``.
"""

from __future__ import annotations

import logging
import secrets
from itertools import combinations
from pathlib import Path

import msgspec
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from geoverity.services.geometry import GeoPoint
from geoverity.services.sessions import SessionIssuer, load_public_key
from geoverity.services.slv import VerifierSite
from geoverity.services.wire import CLIENT_ORIGIN, KeyRing

logger = logging.getLogger(__name__)


class DeploymentError(RuntimeError):
    pass


class ManagerEntry(msgspec.Struct, frozen=True, kw_only=True):
    host: str
    port: int
    wire_id: int = 0


class VerifierEntry(msgspec.Struct, frozen=True, kw_only=True):
    verifier_id: str
    wire_id: int
    lat: float
    lon: float
    host: str
    port: int
    ws_port: int | None = None

    @property
    def location(self) -> GeoPoint:
        return GeoPoint(lat=self.lat, lon=self.lon)

    @property
    def site(self) -> VerifierSite:
        return VerifierSite(verifier_id=self.verifier_id, location=self.location)


class Deployment(msgspec.Struct, frozen=True, kw_only=True):
    manager: ManagerEntry
    verifiers: list[VerifierEntry]

    def __post_init__(self) -> None:
        wire_ids = [self.manager.wire_id, *(v.wire_id for v in self.verifiers)]
        if len(set(wire_ids)) != len(wire_ids):
            raise DeploymentError(f"duplicate wire ids: {wire_ids}")
        if CLIENT_ORIGIN in wire_ids:
            raise DeploymentError(f"wire id {CLIENT_ORIGIN:#x} is reserved for clients")
        names = [v.verifier_id for v in self.verifiers]
        if len(set(names)) != len(names):
            raise DeploymentError(f"duplicate verifier ids: {names}")

    def verifier(self, verifier_id: str) -> VerifierEntry:
        for entry in self.verifiers:
            if entry.verifier_id == verifier_id:
                return entry
        raise DeploymentError(f"unknown verifier: {verifier_id}")

    def by_wire_id(self) -> dict[int, VerifierEntry]:
        return {v.wire_id: v for v in self.verifiers}


class KeyPair(msgspec.Struct, frozen=True, kw_only=True):
    a: int
    b: int
    key: str


class KeyFile(msgspec.Struct, frozen=True, kw_only=True):
    api_key: str
    manager_public_key: str
    pairs: list[KeyPair]
    manager_signing_seed: str | None = None

    def ring_for(self, own_id: int, *, manager_id: int) -> KeyRing:
        pairwise: dict[int, bytes] = {}
        for pair in self.pairs:
            if own_id == pair.a:
                pairwise[pair.b] = bytes.fromhex(pair.key)
            elif own_id == pair.b:
                pairwise[pair.a] = bytes.fromhex(pair.key)
        api_key = bytes.fromhex(self.api_key) if own_id in (manager_id, CLIENT_ORIGIN) else None
        return KeyRing(own_id, pairwise, manager_id=manager_id, api_key=api_key)

    def issuer(self) -> SessionIssuer:
        if not self.manager_signing_seed:
            raise DeploymentError("key file has no manager signing seed")
        return SessionIssuer.from_seed(bytes.fromhex(self.manager_signing_seed))

    def grant_key(self) -> Ed25519PublicKey:
        return load_public_key(bytes.fromhex(self.manager_public_key))

    def without_secrets_for(self, wire_id: int) -> KeyFile:
        """The subset of this file one verifier should hold."""
        return KeyFile(
            api_key="",
            manager_public_key=self.manager_public_key,
            pairs=[p for p in self.pairs if wire_id in (p.a, p.b)],
        )


def generate_keys(deployment: Deployment) -> KeyFile:
    """Fresh pairwise keys for every pair of nodes plus a Manager signing key."""
    signing = Ed25519PrivateKey.generate()
    seed = signing.private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
    )
    public = signing.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    ids = sorted([deployment.manager.wire_id, *(v.wire_id for v in deployment.verifiers)])
    return KeyFile(
        api_key=secrets.token_hex(32),
        manager_public_key=public.hex(),
        manager_signing_seed=seed.hex(),
        pairs=[KeyPair(a=a, b=b, key=secrets.token_hex(32)) for a, b in combinations(ids, 2)],
    )


def load_deployment(path: Path | str) -> Deployment:
    try:
        deployment = msgspec.json.decode(Path(path).read_bytes(), type=Deployment)
    except FileNotFoundError:
        raise DeploymentError(f"deployment file not found: {path}") from None
    logger.info("Deployment loaded: path=%s verifiers=%s", path, len(deployment.verifiers))
    return deployment


def load_keys(path: Path | str) -> KeyFile:
    try:
        return msgspec.json.decode(Path(path).read_bytes(), type=KeyFile)
    except FileNotFoundError:
        raise DeploymentError(f"key file not found: {path}") from None
