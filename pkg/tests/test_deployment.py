"""Tests for deployment and key files."""

import msgspec
import pytest

from geoverity.enums import MsgType
from geoverity.services.deployment import (
    Deployment,
    DeploymentError,
    ManagerEntry,
    VerifierEntry,
    generate_keys,
    load_deployment,
    load_keys,
)
from geoverity.services.geometry import GeoPoint
from geoverity.services.sessions import verify_grant
from geoverity.services.wire import CLIENT_ORIGIN, NO_SESSION


def _verifier(vid, wire_id, lat=45.0, lon=-75.0):
    return VerifierEntry(verifier_id=vid, wire_id=wire_id, lat=lat, lon=lon, host="127.0.0.1", port=7400 + wire_id)


def _deployment():
    return Deployment(
        manager=ManagerEntry(host="127.0.0.1", port=7400),
        verifiers=[_verifier("ottawa", 1), _verifier("montreal", 2, 45.5, -73.6), _verifier("toronto", 3, 43.7, -79.4)],
    )


def test_duplicate_ids_rejected():
    with pytest.raises(DeploymentError):
        Deployment(manager=ManagerEntry(host="h", port=1), verifiers=[_verifier("a", 0)])
    with pytest.raises(DeploymentError):
        Deployment(manager=ManagerEntry(host="h", port=1), verifiers=[_verifier("a", 1), _verifier("a", 2)])
    with pytest.raises(DeploymentError):
        Deployment(manager=ManagerEntry(host="h", port=1), verifiers=[_verifier("a", CLIENT_ORIGIN)])


def test_lookup_helpers():
    deployment = _deployment()
    assert deployment.verifier("montreal").location == GeoPoint(45.5, -73.6)
    assert deployment.by_wire_id()[3].verifier_id == "toronto"
    with pytest.raises(DeploymentError):
        deployment.verifier("paris")


def test_generated_keys_pair_every_node():
    keys = generate_keys(_deployment())
    assert len(keys.pairs) == 6
    manager = keys.ring_for(0, manager_id=0)
    ottawa = keys.ring_for(1, manager_id=0)
    assert manager.for_peer(1, MsgType.TURN, NO_SESSION) == ottawa.for_peer(0, MsgType.TURN, NO_SESSION)
    assert manager.api_key is not None
    assert ottawa.api_key is None


def test_issuer_and_public_key_match():
    keys = generate_keys(_deployment())
    grant = keys.issuer().issue(GeoPoint(45.0, -75.0), now_ms=0)
    assert verify_grant(grant, keys.grant_key(), now_ms=0) == GeoPoint(45.0, -75.0)


def test_verifier_copy_holds_only_its_keys():
    keys = generate_keys(_deployment())
    mine = keys.without_secrets_for(2)
    assert mine.manager_signing_seed is None
    assert mine.api_key == ""
    assert all(2 in (p.a, p.b) for p in mine.pairs)
    assert len(mine.pairs) == 3
    with pytest.raises(DeploymentError):
        mine.issuer()


def test_files_round_trip(tmp_path):
    deployment = _deployment()
    keys = generate_keys(deployment)
    (tmp_path / "deploy.json").write_bytes(msgspec.json.encode(deployment))
    (tmp_path / "keys.json").write_bytes(msgspec.json.encode(keys))
    assert load_deployment(tmp_path / "deploy.json") == deployment
    assert load_keys(tmp_path / "keys.json") == keys


def test_missing_files_raise_deployment_error(tmp_path):
    with pytest.raises(DeploymentError):
        load_deployment(tmp_path / "absent.json")
    with pytest.raises(DeploymentError):
        load_keys(tmp_path / "absent.json")
