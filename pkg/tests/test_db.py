"""Tests for the on-disk pin store and results log."""

import pytest

from geoverity.db import (
    DuplicateResultError,
    NodeRecord,
    PinRecord,
    PinStore,
    PinStoreCorrupt,
    RecordLog,
    RecordLogCorrupt,
    ResultRecord,
    ResultsLog,
    SummaryRecord,
    decode_report,
    encode_report,
)


# ─── pins ─────────────────────────────────────────────────────────────────────


def test_put_then_lookup():
    pins = PinStore()
    pins.put("Example.org.", 45.0, -76.0, now_ms=10)
    (record,) = pins.lookup("example.org")
    assert (record.domain, record.cell_lat, record.cell_lon) == ("example.org", 45.0, -76.0)
    assert pins.get("example.org", 45.0, -76.0) == record


def test_unknown_domain_has_no_pins():
    pins = PinStore()
    pins.put("example.org", 45.0, -76.0, now_ms=10)
    assert pins.lookup("example.com") == []
    assert pins.get("example.org", 45.5, -76.0) is None


def test_put_is_idempotent_and_merges_times():
    pins = PinStore()
    pins.put("example.org", 45.0, -76.0, now_ms=10)
    pins.put("example.org", 45.0, -76.0, now_ms=10)
    merged = pins.put("example.org", 45.0, -76.0, now_ms=50)
    assert len(pins) == 1
    assert (merged.first_verified, merged.last_verified) == (10, 50)


def test_expire():
    pins = PinStore()
    pins.put("old.example", 1.0, 1.0, now_ms=0)
    pins.put("new.example", 1.0, 1.0, now_ms=900)
    assert pins.expire(1000, now_ms=1000) == 1
    assert [r.domain for r in pins] == ["new.example"]
    pins.expire(0, now_ms=1000)
    assert len(pins) == 0


def test_pins_survive_reload(tmp_path):
    pins = PinStore(tmp_path)
    pins.put("example.org", 45.0, -76.0, now_ms=10)
    pins.put("example.net", 48.5, 2.0, now_ms=20)
    pins.put("example.org", 45.0, -76.0, now_ms=30)

    reloaded = PinStore(tmp_path)
    assert len(reloaded) == 2
    assert reloaded.get("example.org", 45.0, -76.0).last_verified == 30


def test_compaction_keeps_state(tmp_path):
    pins = PinStore(tmp_path, snapshot_every=2)
    for t, domain in enumerate(["a.example", "b.example", "c.example"]):
        pins.put(domain, 0.0, 0.0, now_ms=t)
    assert (tmp_path / "pins.snapshot.jsonl").exists()
    assert {r.domain for r in PinStore(tmp_path)} == {"a.example", "b.example", "c.example"}


def test_expire_persists(tmp_path):
    pins = PinStore(tmp_path)
    pins.put("example.org", 45.0, -76.0, now_ms=0)
    pins.expire(0, now_ms=0)
    assert len(PinStore(tmp_path)) == 0


def test_corrupt_log_refuses_to_load(tmp_path):
    pins = PinStore(tmp_path)
    pins.put("example.org", 45.0, -76.0, now_ms=10)
    with (tmp_path / "pins.log.jsonl").open("ab") as fh:
        fh.write(b'{"domain": "broken"\n')
    with pytest.raises(PinStoreCorrupt):
        PinStore(tmp_path)


def test_repair_drops_bad_lines(tmp_path):
    pins = PinStore(tmp_path)
    pins.put("example.org", 45.0, -76.0, now_ms=10)
    with (tmp_path / "pins.log.jsonl").open("ab") as fh:
        fh.write(b"not json\n")
    repaired = PinStore(tmp_path, repair=True)
    assert [r.domain for r in repaired] == ["example.org"]
    # the bad line is gone after repair
    assert len(PinStore(tmp_path)) == 1


# ─── record logs ──────────────────────────────────────────────────────────────


def test_record_log_reports_line_number(tmp_path):
    path = tmp_path / "log.jsonl"
    log = RecordLog(path, PinRecord)
    log.append(PinRecord(domain="a", cell_lat=0.0, cell_lon=0.0, first_verified=1, last_verified=1))
    with path.open("ab") as fh:
        fh.write(b"\n[1, 2]\n")
    with pytest.raises(RecordLogCorrupt) as info:
        list(log.replay())
    assert info.value.line_no == 3
    assert len(list(log.replay(skip_corrupt=True))) == 1


def test_missing_log_replays_empty(tmp_path):
    assert list(RecordLog(tmp_path / "absent.jsonl", PinRecord).replay()) == []


# ─── results ──────────────────────────────────────────────────────────────────


def _result(request_id, outcome="ACCEPT"):
    return ResultRecord(request_id=request_id, kind="cpv", outcome=outcome, recorded_at_ms=1)


def test_each_request_recorded_once(tmp_path):
    results = ResultsLog(tmp_path / "results.jsonl")
    results.record(_result("r1"))
    assert "r1" in results
    with pytest.raises(DuplicateResultError):
        results.record(_result("r1", outcome="REJECT"))
    assert len(results.records) == 1


def test_results_log_remembers_across_restarts(tmp_path):
    ResultsLog(tmp_path / "results.jsonl").record(_result("r1"))
    restarted = ResultsLog(tmp_path / "results.jsonl")
    assert "r1" in restarted
    with pytest.raises(DuplicateResultError):
        restarted.record(_result("r1"))


def test_in_memory_results_log():
    results = ResultsLog(None)
    results.record(_result("r1"))
    results.record(_result("r2"))
    assert [r.request_id for r in results.records] == ["r1", "r2"]


def test_report_records_are_tagged():
    records = [
        NodeRecord(
            node_id="n1",
            triangle_id="t1",
            true_inside=True,
            outcome="ACCEPT",
            pass_count=8,
            valid_count=8,
            n=8,
            epsilon_ms=10.0,
            tau=0.7,
        ),
        SummaryRecord(kind="cpv", n=8, false_accept_rate=0.0, false_reject_rate=0.0),
    ]
    data = encode_report(records)
    first = data.splitlines()[0]
    assert first.startswith(b'{"record":"node"')
    assert b"relayed_by" not in first
    assert decode_report(data) == records


def test_decode_report_rejects_unknown_tag():
    with pytest.raises(RecordLogCorrupt):
        decode_report(b'{"record": "mystery"}\n')
