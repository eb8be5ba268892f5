"""Tests for the geoverity command line."""

import json
import math

import msgspec

from geoverity.cli.main import main
from geoverity.db.results import MiddleboxRecord, SummaryRecord, TraceRecord, decode_report, encode_report
from geoverity.services.experiment import BatterySpec, ExperimentConfig, ParamsSpec

R2 = 2.0 * 10.0 / math.sqrt(3.0)


def _trace(node_id, inside, pair_sum, rounds=100):
    return TraceRecord(
        node_id=node_id,
        triangle_id="t00",
        inside=inside,
        baseline=(10.0, 10.0, 10.0),
        rounds=[[pair_sum] * 6 for _ in range(rounds)],
    )


def test_report_pools_runs(tmp_path, capsys):
    path = tmp_path / "report.jsonl"
    path.write_bytes(
        encode_report(
            [
                SummaryRecord(kind="cpv", n=10, false_accepts=1, outside_total=50, inside_total=50, reference_fa_pct=2.1),
                SummaryRecord(kind="cpv", n=10, false_rejects=2, outside_total=50, inside_total=50, reference_fa_pct=2.1),
            ]
        )
    )
    assert main(["report", str(path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split()[:3] == ["kind", "n", "runs"]
    assert out[1].split()[:7] == ["cpv", "10", "2", "1.00", "2.00", "2.10", "-"]


def test_report_without_summaries(tmp_path, capsys):
    path = tmp_path / "empty.jsonl"
    path.write_bytes(b"")
    assert main(["report", str(path)]) == 2
    assert "No summary records" in capsys.readouterr().err


def test_corrupt_report_is_invalid_input(tmp_path, capsys):
    path = tmp_path / "bad.jsonl"
    path.write_bytes(b"{not json\n")
    assert main(["report", str(path)]) == 2
    assert "Invalid input" in capsys.readouterr().err


def test_missing_file(tmp_path, capsys):
    assert main(["report", str(tmp_path / "absent.jsonl")]) == 2
    assert "File not found" in capsys.readouterr().err


def test_calibrate_from_traces(tmp_path, capsys):
    path = tmp_path / "traces.jsonl"
    path.write_bytes(encode_report([_trace("in", True, R2), _trace("out", False, 40.0)]))
    assert main(["calibrate", str(path)]) == 0
    assert json.loads(capsys.readouterr().out) == {"epsilon_ms": 0.0, "n": 10, "tau": 0.9}


def test_calibrate_filters_by_triangle(tmp_path, capsys):
    path = tmp_path / "traces.jsonl"
    path.write_bytes(encode_report([_trace("in", True, R2)]))
    assert main(["calibrate", str(path), "--triangle", "t99"]) == 2
    assert "No trace records" in capsys.readouterr().err


def test_calibrate_failure_exit_code(tmp_path):
    path = tmp_path / "traces.jsonl"
    path.write_bytes(encode_report([_trace("in", True, R2, rounds=5)]))
    assert main(["calibrate", str(path)]) == 1


def test_puzzle_sim_single_configuration(tmp_path):
    out = tmp_path / "mb.jsonl"
    argv = ["puzzle-sim", "--clients", "4", "--difficulty", "6", "--rounds", "5", "--out", str(out)]
    assert main(argv) == 0
    records = decode_report(out.read_bytes())
    assert len(records) == 4 * 5 * 3
    assert all(isinstance(r, MiddleboxRecord) for r in records)


def test_puzzle_sim_sweep(tmp_path):
    out = tmp_path / "sweep.jsonl"
    argv = ["puzzle-sim", "--clients", "4", "--difficulty", "4,8", "--cores", "1,2", "--rounds", "3", "--out", str(out)]
    assert main(argv) == 0
    assert len(out.read_bytes().splitlines()) == 4


def test_puzzle_sim_rejects_bad_parameters(capsys):
    assert main(["puzzle-sim", "--clients", "0"]) == 2
    assert "Invalid parameters" in capsys.readouterr().err


def test_keygen_writes_split_files(tmp_path):
    deployment = {
        "manager": {"host": "127.0.0.1", "port": 7400},
        "verifiers": [
            {"verifier_id": name, "wire_id": i + 1, "lat": 45.0 + i, "lon": -75.0, "host": "127.0.0.1", "port": 7401 + i}
            for i, name in enumerate(["a", "b", "c"])
        ],
    }
    (tmp_path / "deploy.json").write_text(json.dumps(deployment))
    argv = ["keygen", str(tmp_path / "deploy.json"), "--out", str(tmp_path / "keys.json"), "--split-dir", str(tmp_path / "split")]
    assert main(argv) == 0
    keys = json.loads((tmp_path / "keys.json").read_text())
    assert len(keys["pairs"]) == 6
    trimmed = json.loads((tmp_path / "split" / "b.keys.json").read_text())
    assert "manager_signing_seed" not in trimmed or trimmed["manager_signing_seed"] is None
    assert len(trimmed["pairs"]) == 3


def test_keygen_with_bad_deployment(tmp_path, capsys):
    (tmp_path / "deploy.json").write_text('{"manager": {"host": "h"}}')
    assert main(["keygen", str(tmp_path / "deploy.json"), "--out", str(tmp_path / "keys.json")]) == 2


def test_sim_run_is_reproducible(tmp_path):
    config = ExperimentConfig(
        seed=4,
        battery=BatterySpec(triangles=1, inside_clients=3, outside_clients=3),
        params=ParamsSpec(n=4),
    )
    (tmp_path / "exp.json").write_bytes(msgspec.json.encode(config))
    outs = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    for out in outs:
        assert main(["sim", "run", str(tmp_path / "exp.json"), "--out", str(out)]) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    summaries = [r for r in decode_report(outs[0].read_bytes()) if isinstance(r, SummaryRecord)]
    assert [s.n for s in summaries] == [4]


def test_sim_run_seed_override(tmp_path):
    config = ExperimentConfig(seed=4, battery=BatterySpec(triangles=1, inside_clients=3, outside_clients=3))
    (tmp_path / "exp.json").write_bytes(msgspec.json.encode(config))
    assert main(["sim", "run", str(tmp_path / "exp.json"), "--seed", "9", "--out", str(tmp_path / "r.jsonl")]) == 0
    summary = next(r for r in decode_report((tmp_path / "r.jsonl").read_bytes()) if isinstance(r, SummaryRecord))
    assert summary.seed == 9
