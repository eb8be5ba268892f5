"""cpv.py — client presence verification: iterate MP rounds, test, vote."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from geoverity.enums import EpsilonMode, IterationOutcome, Outcome, RoundStatus
from geoverity.services.config import (
    AREA_TOLERANCE_MS2,
    BASELINE_STALENESS_MS,
    DEMO_EPSILON_MS,
    DEMO_INTERVAL_MS,
    DEMO_ITERATIONS,
    DEMO_TAU,
    RELAY_TIMEOUT_MS,
)
from geoverity.services.geometry import (
    Baseline,
    InvalidIterationError,
    TriangleSpec,
    cpv_condition,
)
from geoverity.services.mp import MpRound, MpSession, OwdEstimate, run_mp_round

logger = logging.getLogger(__name__)

# pass fraction is compared against τ with this slack so 14/20 meets 0.7
_VOTE_TOLERANCE = 1e-9


class CpvError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class CalibrationParams:
    epsilon_ms: float = DEMO_EPSILON_MS
    n: int = DEMO_ITERATIONS
    tau: float = DEMO_TAU

    def __post_init__(self) -> None:
        if self.n < 1:
            raise CpvError(f"iteration count must be >= 1: {self.n}")
        if not 0.0 < self.tau <= 1.0:
            raise CpvError(f"tau must be in (0, 1]: {self.tau}")
        if self.epsilon_ms < 0.0:
            raise CpvError(f"epsilon must be non-negative: {self.epsilon_ms}")

    @property
    def validity_floor(self) -> int:
        return math.ceil(self.n / 2)


@dataclass(frozen=True, slots=True)
class IterationRecord:
    seq: int
    outcome: IterationOutcome
    estimate: OwdEstimate | None = None
    status: RoundStatus = RoundStatus.COMPLETE


@dataclass(slots=True)
class VerificationResult:
    outcome: Outcome
    iterations_total: int
    iterations_valid: int
    iterations_passed: int
    iterations_tampered: int = 0
    per_iteration: list[IterationRecord] = field(default_factory=list)
    reason: str | None = None

    @property
    def accepted(self) -> bool:
        return self.outcome is Outcome.ACCEPTED

    @property
    def pass_fraction(self) -> float | None:
        if self.iterations_valid == 0:
            return None
        return self.iterations_passed / self.iterations_valid

    @classmethod
    def indeterminate(cls, reason: str) -> VerificationResult:
        return cls(
            outcome=Outcome.INDETERMINATE,
            iterations_total=0,
            iterations_valid=0,
            iterations_passed=0,
            reason=reason,
        )


@dataclass(frozen=True, slots=True)
class FaFr:
    false_accept_rate: float | None
    false_reject_rate: float | None
    false_accepts: int
    false_rejects: int
    outside_total: int
    inside_total: int
    indeterminate: int


def judge_round(
    mp_round: MpRound,
    baseline: Baseline,
    epsilon_ms: float,
    *,
    mode: EpsilonMode = EpsilonMode.PER_SIDE,
    tolerance: float = AREA_TOLERANCE_MS2,
) -> IterationRecord:
    estimate = mp_round.estimate
    if mp_round.status is not RoundStatus.COMPLETE or estimate is None:
        return IterationRecord(seq=mp_round.seq, outcome=IterationOutcome.INVALID, status=mp_round.status)
    try:
        passed = cpv_condition(estimate, baseline, epsilon_ms, mode=mode, tolerance=tolerance)
    except InvalidIterationError as exc:
        logger.debug("CPV_INVALID: seq=%s reason=%s", mp_round.seq, exc)
        return IterationRecord(seq=mp_round.seq, outcome=IterationOutcome.INVALID, estimate=estimate)
    outcome = IterationOutcome.PASS if passed else IterationOutcome.FAIL
    return IterationRecord(seq=mp_round.seq, outcome=outcome, estimate=estimate)


def vote(passed: int, valid: int, params: CalibrationParams) -> Outcome:
    """τ-majority over valid iterations with a ceil(n/2) validity floor."""
    if valid < params.validity_floor:
        return Outcome.INDETERMINATE
    if passed >= params.tau * valid - _VOTE_TOLERANCE:
        return Outcome.ACCEPTED
    return Outcome.REJECTED


def tally(records: Sequence[IterationRecord], params: CalibrationParams) -> VerificationResult:
    valid = sum(1 for r in records if r.outcome is not IterationOutcome.INVALID)
    passed = sum(1 for r in records if r.outcome is IterationOutcome.PASS)
    tampered = sum(1 for r in records if r.status is RoundStatus.TAMPERED)

    outcome = vote(passed, valid, params)
    reason = None
    if outcome is Outcome.INDETERMINATE:
        reason = "relay_tampered" if tampered else "too_few_valid_iterations"
    return VerificationResult(
        outcome=outcome,
        iterations_total=len(records),
        iterations_valid=valid,
        iterations_passed=passed,
        iterations_tampered=tampered,
        per_iteration=list(records),
        reason=reason,
    )


def baseline_is_fresh(triangle: TriangleSpec, now_ms: float | None, staleness_ms: float) -> bool:
    if triangle.measured_at_ms is None or now_ms is None:
        return True
    return now_ms - triangle.measured_at_ms <= staleness_ms


async def collect_rounds(
    session: MpSession,
    count: int,
    *,
    interval_ms: float = DEMO_INTERVAL_MS,
    timeout_ms: float = RELAY_TIMEOUT_MS,
) -> list[MpRound]:
    rounds: list[MpRound] = []
    for seq in range(count):
        if seq:
            await session.pause(interval_ms)
        rounds.append(await run_mp_round(session, seq, timeout_ms=timeout_ms))
    return rounds


async def verify_presence(
    session: MpSession,
    triangle: TriangleSpec,
    params: CalibrationParams,
    *,
    interval_ms: float = DEMO_INTERVAL_MS,
    timeout_ms: float = RELAY_TIMEOUT_MS,
    staleness_ms: float = BASELINE_STALENESS_MS,
    now_ms: float | None = None,
    mode: EpsilonMode = EpsilonMode.PER_SIDE,
) -> VerificationResult:
    if not baseline_is_fresh(triangle, now_ms, staleness_ms):
        logger.warning(
            "CPV_STALE_BASELINE: session=%s triangle=%s measured_at=%s now=%s",
            session.session_id,
            triangle.triangle_id,
            triangle.measured_at_ms,
            now_ms,
        )
        return VerificationResult.indeterminate("stale_baseline")

    rounds = await collect_rounds(session, params.n, interval_ms=interval_ms, timeout_ms=timeout_ms)
    records = [judge_round(r, triangle.baseline, params.epsilon_ms, mode=mode) for r in rounds]
    result = tally(records, params)
    logger.info(
        "CPV_VERDICT: session=%s triangle=%s outcome=%s passed=%s valid=%s total=%s",
        session.session_id,
        triangle.triangle_id,
        result.outcome.value,
        result.iterations_passed,
        result.iterations_valid,
        result.iterations_total,
    )
    return result


def evaluate_fa_fr(experiment: Iterable[tuple[bool, VerificationResult]]) -> FaFr:
    inside_total = outside_total = false_accepts = false_rejects = indeterminate = 0
    for true_inside, result in experiment:
        if result.outcome is Outcome.INDETERMINATE:
            indeterminate += 1
            continue
        if true_inside:
            inside_total += 1
            false_rejects += int(result.outcome is Outcome.REJECTED)
        else:
            outside_total += 1
            false_accepts += int(result.outcome is Outcome.ACCEPTED)
    return FaFr(
        false_accept_rate=false_accepts / outside_total if outside_total else None,
        false_reject_rate=false_rejects / inside_total if inside_total else None,
        false_accepts=false_accepts,
        false_rejects=false_rejects,
        outside_total=outside_total,
        inside_total=inside_total,
        indeterminate=indeterminate,
    )
