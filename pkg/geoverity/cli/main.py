"""
main.py — command-line front-end for daemons, simulations and offline tools.

Structure:
  verifierd   — run one verifier from the deployment file
  managerd    — run the Manager (registry, sessions, verdicts, results log)
  keygen      — generate the shared key file for a deployment
  client      — reference client: request a CPV or SLV verification
  sim         — run a simulated experiment and write its report
  calibrate   — grid-search (ε, n, τ) from recorded ground-truth traces
  report      — aggregate summary records across report files
  puzzle-sim  — queueing model of a puzzle-solving middlebox

Usage:
  python -m geoverity sim run experiment.json --out report.jsonl
  python -m geoverity calibrate report.jsonl
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from asyncio import CancelledError
from collections import defaultdict
from collections.abc import Coroutine
from pathlib import Path
from typing import Any, Iterable

import msgspec

from geoverity.db.base import RecordLogCorrupt
from geoverity.db.results import MiddleboxRecord, SummaryRecord, TraceRecord, decode_report, encode_report
from geoverity.enums import EpsilonMode, RequestKind
from geoverity.services.calibration import CalibrationError, CalibrationFailed, GroundTruthTrace, calibrate
from geoverity.services.cpv import CalibrationParams
from geoverity.services.deployment import DeploymentError, generate_keys, load_deployment, load_keys
from geoverity.settings import se

logger = logging.getLogger(__name__)


def run_async(coro: Coroutine[Any, Any, Any]) -> Any:
    try:
        import uvloop
        loop_factory = uvloop.new_event_loop
    except ModuleNotFoundError:
        loop_factory = asyncio.new_event_loop

    with asyncio.Runner(loop_factory=loop_factory) as runner:
        return runner.run(coro)


def _floats(raw: str) -> list[float]:
    return [float(x) for x in raw.split(",") if x.strip()]


def _ints(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x.strip()]


def _offset(raw: str) -> tuple[str, float]:
    peer, sep, value = raw.partition("=")
    if not sep or not peer:
        raise argparse.ArgumentTypeError(f"expected PEER=MS, got {raw!r}")
    return peer, float(value)


def _parse_args(argv: Iterable[str] | None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="geoverity",
        description="Client presence and server location verification.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    def deployment_args(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--deployment",
            default=se.deployment_file,
            help=f"Deployment JSON file (default: {se.deployment_file})",
        )
        p.add_argument("--keys", default=se.key_file, help=f"Key file (default: {se.key_file})")
        p.add_argument("--bind", default=None, help="Listen address (default: host from the deployment)")

    p = sub.add_parser("verifierd", help="Run one verifier")
    deployment_args(p)
    p.add_argument("--id", dest="verifier_id", required=True, help="Verifier id from the deployment")
    p.add_argument(
        "--offset",
        action="append",
        type=_offset,
        default=[],
        metavar="PEER=MS",
        help="Known clock offset of a peer, repeatable (default: estimated)",
    )
    p.add_argument(
        "--probe-port",
        type=int,
        default=80,
        help="TCP port for server location probes (default: 80)",
    )

    p = sub.add_parser("managerd", help="Run the Manager")
    deployment_args(p)
    p.add_argument("--epsilon", type=float, default=se.cpv.epsilon_ms, help=f"ε in ms (default: {se.cpv.epsilon_ms})")
    p.add_argument("--tau", type=float, default=se.cpv.tau, help=f"Vote threshold (default: {se.cpv.tau})")
    p.add_argument(
        "--iterations",
        type=int,
        default=se.cpv.iterations,
        help=f"MP rounds per request (default: {se.cpv.iterations})",
    )
    p.add_argument(
        "--puzzle-difficulty",
        type=int,
        default=se.cpv.puzzle_difficulty,
        help=f"Leading zero bits per relayed timestamp, 0 disables (default: {se.cpv.puzzle_difficulty})",
    )
    p.add_argument(
        "--ip-table",
        default=se.ip_table_file,
        help="JSON-lines IP location table for SLV requests without a location",
    )

    p = sub.add_parser("keygen", help="Generate a key file for a deployment")
    p.add_argument("deployment", help="Deployment JSON file")
    p.add_argument("--out", required=True, help="Key file to write")
    p.add_argument(
        "--split-dir",
        default=None,
        help="Also write one secret-trimmed key file per verifier into this directory",
    )

    p = sub.add_parser("client", help="Request a verification from the Manager")
    p.add_argument("kind", choices=[k.value for k in RequestKind], help="Verification kind")
    p.add_argument("--deployment", default=se.deployment_file, help=f"Deployment JSON file (default: {se.deployment_file})")
    p.add_argument("--keys", default=se.key_file, help=f"Key file holding the API key (default: {se.key_file})")
    p.add_argument("--lat", type=float, default=None, help="Asserted latitude")
    p.add_argument("--lon", type=float, default=None, help="Asserted longitude")
    p.add_argument("--ip", dest="server_ip", default=None, help="Server IP (slv only)")
    p.add_argument("--domain", default=None, help="Server domain (slv only)")
    p.add_argument("--timeout", type=float, default=120.0, help="Overall timeout in seconds (default: 120)")

    p = sub.add_parser("sim", help="Simulated experiments")
    sim_sub = p.add_subparsers(dest="sim_command", required=True)
    run = sim_sub.add_parser("run", help="Run an experiment config")
    run.add_argument("config", help="Experiment JSON config")
    run.add_argument("--out", default=None, help="Report file (default: stdout)")
    run.add_argument("--seed", type=int, default=None, help="Override the config seed")

    p = sub.add_parser("calibrate", help="Pick (ε, n, τ) from recorded traces")
    p.add_argument("traces", nargs="+", help="Report files holding trace records")
    p.add_argument("--epsilons", type=_floats, default=None, help="Comma-separated ε grid in ms (default: 0..30)")
    p.add_argument("--taus", type=_floats, default=None, help="Comma-separated τ grid (default: 0.5..0.9)")
    p.add_argument("--iterations", type=_ints, default=None, help="Comma-separated n grid (default: 10,20,50,100)")
    p.add_argument(
        "--mode",
        choices=[m.value for m in EpsilonMode],
        default=EpsilonMode.PER_SIDE.value,
        help="How ε enters the area bound (default: per_side)",
    )
    p.add_argument("--triangle", default=None, help="Only use traces of this triangle id")

    p = sub.add_parser("report", help="Aggregate summary records")
    p.add_argument("reports", nargs="+", help="Report files")

    p = sub.add_parser("puzzle-sim", help="Added delay of a puzzle-solving middlebox")
    p.add_argument("--clients", type=int, default=100, help="Relayed clients (default: 100)")
    p.add_argument("--difficulty", type=_ints, default=[8], help="Comma-separated difficulties (default: 8)")
    p.add_argument("--cores", type=_ints, default=[1], help="Comma-separated core counts (default: 1)")
    p.add_argument("--rate", type=float, default=100.0, help="Hashes per ms per core (default: 100)")
    p.add_argument("--rounds", type=int, default=50, help="MP rounds (default: 50)")
    p.add_argument("--interval", type=float, default=300.0, help="Round interval in ms (default: 300)")
    p.add_argument("--seed", type=int, default=0, help="Arrival jitter seed (default: 0)")
    p.add_argument("--out", default=None, help="Output file (default: stdout)")
    return parser.parse_args(argv)


def _write(data: bytes, out: str | None) -> None:
    if out is None:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        Path(out).write_bytes(data)


# ─── Daemons ──────────────────────────────────────────────────────────────────


async def _verifierd(args: argparse.Namespace) -> None:
    from geoverity.services.clock import ClockSource, ClockSyncError
    from geoverity.services.probing import NetworkProber
    from geoverity.services.verifier import VerifierNode

    deployment = load_deployment(args.deployment)
    keys = load_keys(args.keys)
    entry = deployment.verifier(args.verifier_id)
    clock = ClockSource(se.sync.ntp_server)
    if se.sync.ntp_server:
        try:
            await clock.refresh_ntp()
        except (ClockSyncError, OSError) as exc:
            logger.warning("NTP_UNAVAILABLE: server=%s reason=%s", se.sync.ntp_server, exc)
    node = VerifierNode(
        entry,
        deployment,
        keys,
        prober=NetworkProber(port=args.probe_port),
        clock=clock,
        window=se.sync.baseline_window,
        static_offsets=dict(args.offset) or None,
        staleness_ms=se.cpv.staleness_ms,
        grant_key=keys.grant_key(),
    )
    await node.run(
        bind_host=args.bind,
        baseline_period_s=se.sync.baseline_period_s,
        offset_period_s=se.sync.offset_period_s,
    )


async def _managerd(args: argparse.Namespace) -> None:
    from geoverity.services.manager import IpLocationTable, ManagerOptions
    from geoverity.services.manager_server import ManagerServer

    deployment = load_deployment(args.deployment)
    keys = load_keys(args.keys)
    options = ManagerOptions(
        params=CalibrationParams(epsilon_ms=args.epsilon, n=args.iterations, tau=args.tau),
        epsilon_mode=se.cpv.epsilon_mode,
        interval_ms=se.cpv.interval_ms,
        relay_timeout_ms=se.cpv.relay_timeout_ms,
        staleness_ms=se.cpv.staleness_ms,
        slv_epsilon_ms=se.slv.epsilon_ms,
        slv_samples_per_layer=se.slv.samples_per_layer,
        circle_rule=se.slv.circle_rule,
        pin_cell_deg=se.slv.pin_cell_deg,
    )
    se.data_dir.mkdir(parents=True, exist_ok=True)
    server = ManagerServer(
        deployment,
        keys,
        results_path=se.results_log_path,
        pin_dir=se.pin_store_dir,
        options=options,
        ip_table=IpLocationTable.load(args.ip_table) if args.ip_table else None,
        pin_repair=se.pin_repair,
        puzzle_difficulty=args.puzzle_difficulty,
    )
    await server.run(bind_host=args.bind)


def _keygen(args: argparse.Namespace) -> int:
    deployment = load_deployment(args.deployment)
    keys = generate_keys(deployment)
    Path(args.out).write_bytes(msgspec.json.format(msgspec.json.encode(keys)))
    if args.split_dir:
        split = Path(args.split_dir)
        split.mkdir(parents=True, exist_ok=True)
        for v in deployment.verifiers:
            trimmed = keys.without_secrets_for(v.wire_id)
            (split / f"{v.verifier_id}.keys.json").write_bytes(msgspec.json.format(msgspec.json.encode(trimmed)))
    print(f"wrote {args.out}: {len(keys.pairs)} pairwise keys", file=sys.stderr)
    return 0


async def _client(args: argparse.Namespace) -> int:
    from geoverity.services.client import ReferenceClient

    deployment = load_deployment(args.deployment)
    keys = load_keys(args.keys)
    client = ReferenceClient(deployment.manager.host, deployment.manager.port, bytes.fromhex(keys.api_key))
    if args.kind == RequestKind.CPV.value:
        if args.lat is None or args.lon is None:
            print("cpv needs --lat and --lon", file=sys.stderr)
            return 2
        response = await client.verify_cpv(args.lat, args.lon, timeout_s=args.timeout)
    else:
        if args.server_ip is None:
            print("slv needs --ip", file=sys.stderr)
            return 2
        response = await client.verify_slv(
            args.server_ip,
            lat=args.lat,
            lon=args.lon,
            domain=args.domain,
            timeout_s=args.timeout,
        )
    _write(msgspec.json.format(msgspec.json.encode(response)) + b"\n", None)
    return 0 if response.status == "verdict" else 1


# ─── Offline tools ────────────────────────────────────────────────────────────


def _sim_run(args: argparse.Namespace) -> int:
    from geoverity.services.experiment import ExperimentError, load_config, run_experiment

    config = load_config(Path(args.config))
    if args.seed is not None:
        config = msgspec.structs.replace(config, seed=args.seed)
    try:
        report = run_async(run_experiment(config))
    except ExperimentError as exc:
        print(f"Experiment failed: {exc}", file=sys.stderr)
        return 1
    _write(report.encode(), args.out)
    return 0


def _load_traces(paths: Iterable[str], triangle: str | None) -> list[GroundTruthTrace]:
    traces = []
    for path in paths:
        for record in decode_report(Path(path).read_bytes(), source=path):
            if isinstance(record, TraceRecord) and (triangle is None or record.triangle_id == triangle):
                traces.append(GroundTruthTrace.from_record(record))
    return traces


def _calibrate(args: argparse.Namespace) -> int:
    traces = _load_traces(args.traces, args.triangle)
    if not traces:
        print("No trace records found", file=sys.stderr)
        return 2
    kwargs: dict = {"mode": EpsilonMode(args.mode)}
    if args.epsilons:
        kwargs["epsilons"] = args.epsilons
    if args.taus:
        kwargs["taus"] = args.taus
    if args.iterations:
        kwargs["iterations"] = args.iterations
    try:
        params = calibrate(traces, **kwargs)
    except CalibrationFailed as exc:
        print(f"Calibration failed: {exc}", file=sys.stderr)
        return 1
    except CalibrationError as exc:
        print(f"Calibration error: {exc}", file=sys.stderr)
        return 1
    _write(msgspec.json.encode(params) + b"\n", None)
    return 0


def _pct(count: int, total: int) -> str:
    return "-" if total == 0 else f"{100.0 * count / total:.2f}"


def _report(args: argparse.Namespace) -> int:
    groups: dict[tuple[str, int | None], list[SummaryRecord]] = defaultdict(list)
    for path in args.reports:
        for record in decode_report(Path(path).read_bytes(), source=path):
            if isinstance(record, SummaryRecord):
                groups[(record.kind, record.n)].append(record)
    if not groups:
        print("No summary records found", file=sys.stderr)
        return 2

    print(f"{'kind':<10} {'n':>5} {'runs':>5} {'FA%':>7} {'FR%':>7} {'ref FA%':>8} {'ref FR%':>8} {'indet':>6}")
    for (kind, n), rows in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0)):
        fa = sum(r.false_accepts for r in rows)
        fr = sum(r.false_rejects for r in rows)
        outside = sum(r.outside_total for r in rows)
        inside = sum(r.inside_total for r in rows)
        ref_fa = rows[0].reference_fa_pct
        ref_fr = rows[0].reference_fr_pct
        print(
            f"{kind:<10} {n if n is not None else '-':>5} {len(rows):>5} "
            f"{_pct(fa, outside):>7} {_pct(fr, inside):>7} "
            f"{'-' if ref_fa is None else f'{ref_fa:.2f}':>8} {'-' if ref_fr is None else f'{ref_fr:.2f}':>8} "
            f"{sum(r.indeterminate for r in rows):>6}"
        )
    return 0


def _puzzle_sim(args: argparse.Namespace) -> int:
    from geoverity.services.middlebox import MiddleboxParamsError, simulate_middlebox, sweep_middlebox

    try:
        if len(args.difficulty) == 1 and len(args.cores) == 1:
            trace = simulate_middlebox(
                args.clients,
                args.difficulty[0],
                args.cores[0],
                args.rate,
                args.rounds,
                args.interval,
                seed=args.seed,
            )
            records: list[MiddleboxRecord] = trace.to_records()
            _write(encode_report(records), args.out)
            return 0
        points = sweep_middlebox(
            args.clients, args.difficulty, args.cores, args.rate, args.rounds, args.interval, seed=args.seed
        )
    except MiddleboxParamsError as exc:
        print(f"Invalid parameters: {exc}", file=sys.stderr)
        return 2
    _write(b"".join(msgspec.json.encode(p) + b"\n" for p in points), args.out)
    return 0


# ─── Entry ────────────────────────────────────────────────────────────────────


def main(argv: Iterable[str] | None = None) -> int:
    args = _parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        match args.command:
            case "verifierd":
                run_async(_verifierd(args))
                return 0
            case "managerd":
                run_async(_managerd(args))
                return 0
            case "keygen":
                return _keygen(args)
            case "client":
                return run_async(_client(args))
            case "sim":
                return _sim_run(args)
            case "calibrate":
                return _calibrate(args)
            case "report":
                return _report(args)
            case "puzzle-sim":
                return _puzzle_sim(args)
    except (CancelledError, KeyboardInterrupt):
        return 0
    except (DeploymentError, RecordLogCorrupt, msgspec.ValidationError, msgspec.DecodeError) as exc:
        print(f"Invalid input: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"File not found: {exc.filename}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.exception("Command failed: %s", args.command)
        print(f"Failed: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
