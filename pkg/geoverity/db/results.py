"""
Results log and experiment report records.

Every line is a JSON object tagged by its "record" field:
  node       — one CPV client judged against one triangle
  slv        — one SLV assertion judged by one verifier triple
  trace      — raw MP rounds of a ground-truth node, input to calibration
  skipped    — a triangle left out of an experiment, with the reason
  summary    — aggregate false-accept / false-reject figures
  middlebox  — added puzzle delay for one relayed message
  result     — one terminal Manager request outcome
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Final

import msgspec

from geoverity.db.base import RecordLog, decode_lines, encode_lines

logger = logging.getLogger(__name__)


class _Record(msgspec.Struct, kw_only=True, tag_field="record", omit_defaults=True):
    pass


class NodeRecord(_Record, tag="node"):
    node_id: str
    triangle_id: str
    true_inside: bool
    outcome: str
    pass_count: int
    valid_count: int
    n: int
    epsilon_ms: float
    tau: float
    access_type: str = "wired"
    relayed_by: str | None = None
    tampered_count: int = 0


class SlvRecord(_Record, tag="slv"):
    server_id: str
    triangle_id: str
    truthful: bool
    outcome: str
    epsilon_ms: float
    covering_pairs: int = 0
    passed: bool | None = None


class TraceRecord(_Record, tag="trace"):
    """Recorded MP rounds of one node, replayable by the calibrator."""

    node_id: str
    triangle_id: str
    inside: bool
    baseline: tuple[float, float, float]
    # a_b, a_c, b_a, b_c, c_a, c_b per round; null for rounds without a delay set
    rounds: list[list[float] | None]


class SkippedRecord(_Record, tag="skipped"):
    triangle_id: str
    reason: str


class SummaryRecord(_Record, tag="summary"):
    kind: str
    n: int | None = None
    epsilon_ms: float | None = None
    tau: float | None = None
    false_accept_rate: float | None = None
    false_reject_rate: float | None = None
    false_accepts: int = 0
    false_rejects: int = 0
    inside_total: int = 0
    outside_total: int = 0
    indeterminate: int = 0
    excluded: int = 0
    reference_fa_pct: float | None = None
    reference_fr_pct: float | None = None
    seed: int | None = None


class MiddleboxRecord(_Record, tag="middlebox"):
    round: int
    client_id: int
    turn: int
    added_delay_ms: float


class ResultRecord(_Record, tag="result"):
    request_id: str
    kind: str
    outcome: str
    recorded_at_ms: int
    triangle_id: str | None = None
    pass_count: int | None = None
    valid_count: int | None = None
    n: int | None = None
    epsilon_ms: float | None = None
    tau: float | None = None
    tampered_count: int | None = None
    server_ip: str | None = None
    domain: str | None = None
    verification_passed: bool | None = None
    reason: str | None = None


ReportRecord = (
    NodeRecord | SlvRecord | TraceRecord | SkippedRecord | SummaryRecord | MiddleboxRecord | ResultRecord
)

REPORT_RECORD_TYPES: Final[tuple[type[_Record], ...]] = (
    NodeRecord,
    SlvRecord,
    TraceRecord,
    SkippedRecord,
    SummaryRecord,
    MiddleboxRecord,
    ResultRecord,
)


def encode_report(records: list[ReportRecord]) -> bytes:
    return encode_lines(records)


def decode_report(data: bytes, *, source: Path | str = "<report>") -> list[ReportRecord]:
    return decode_lines(data, ReportRecord, source=source)


class DuplicateResultError(RuntimeError):
    pass


class ResultsLog:
    """Single-writer log of terminal request outcomes, one line per request."""

    def __init__(self, path: Path | None) -> None:
        self._log: RecordLog[ResultRecord] | None = RecordLog(path, ResultRecord) if path else None
        self._seen: set[str] = set()
        self.records: list[ResultRecord] = []
        if self._log is not None:
            for record in self._log.replay(skip_corrupt=True):
                self._seen.add(record.request_id)

    def __contains__(self, request_id: object) -> bool:
        return request_id in self._seen

    def record(self, record: ResultRecord) -> None:
        if record.request_id in self._seen:
            raise DuplicateResultError(f"request {record.request_id} already has an outcome")
        self._seen.add(record.request_id)
        self.records.append(record)
        if self._log is not None:
            self._log.append(record)
        logger.info(
            "RESULT_RECORDED: request=%s kind=%s outcome=%s",
            record.request_id,
            record.kind,
            record.outcome,
        )
