"""calibration.py — grid search for (ε, n, τ) from ground-truth traces."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from geoverity.db.results import TraceRecord
from geoverity.enums import CircleRule, EpsilonMode, Outcome
from geoverity.services.config import (
    AREA_TOLERANCE_MS2,
    CALIBRATION_EPSILONS_MS,
    CALIBRATION_ITERATIONS,
    CALIBRATION_MIN_ROUNDS,
    CALIBRATION_TAUS,
)
from geoverity.services.cpv import CalibrationParams, vote
from geoverity.services.geometry import (
    AreaExcess,
    Baseline,
    InvalidIterationError,
    area_excess,
    epsilon_area,
    side_slack,
)
from geoverity.services.mp import OwdEstimate, PairwiseDelaySet, min_pairs, solve_owd
from geoverity.services.slv import SlvIndeterminate, SlvMeasurement

logger = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class Confusion:
    params: CalibrationParams | None
    false_rejects: int
    false_accepts: int
    inside_total: int
    outside_total: int

    @property
    def errors(self) -> int:
        return self.false_rejects + self.false_accepts


class CalibrationFailed(CalibrationError):
    def __init__(self, best: Confusion) -> None:
        self.best = best
        super().__init__(
            "no parameter combination separates the ground truth "
            f"(best: {best.false_rejects}/{best.inside_total} false rejects, "
            f"{best.false_accepts}/{best.outside_total} false accepts at {best.params})"
        )


@dataclass(frozen=True, slots=True)
class GroundTruthTrace:
    node_id: str
    inside: bool
    baseline: Baseline
    # None marks a round that produced no estimate
    estimates: tuple[OwdEstimate | None, ...]
    triangle_id: str = ""

    @classmethod
    def from_record(cls, record: TraceRecord) -> GroundTruthTrace:
        estimates = tuple(
            None if r is None else solve_owd(min_pairs(PairwiseDelaySet(*r))) for r in record.rounds
        )
        return cls(
            node_id=record.node_id,
            inside=record.inside,
            baseline=tuple(record.baseline),
            estimates=estimates,
            triangle_id=record.triangle_id,
        )


def _excesses(trace: GroundTruthTrace) -> list[AreaExcess | None]:
    out: list[AreaExcess | None] = []
    for est in trace.estimates:
        if est is None:
            out.append(None)
            continue
        try:
            out.append(area_excess(est, trace.baseline))
        except InvalidIterationError:
            out.append(None)
    return out


def _cumulative_counts(
    excesses: list[AreaExcess | None],
    margin: float,
    slack: float,
) -> tuple[np.ndarray, np.ndarray]:
    valid = np.array([e is not None for e in excesses], dtype=np.int64)
    passed = np.array(
        [e is not None and e.passes(margin, slack, AREA_TOLERANCE_MS2) for e in excesses],
        dtype=np.int64,
    )
    return np.cumsum(valid), np.cumsum(passed)


def calibrate(
    traces: Sequence[GroundTruthTrace],
    *,
    epsilons: Sequence[float] = CALIBRATION_EPSILONS_MS,
    taus: Sequence[float] = CALIBRATION_TAUS,
    iterations: Sequence[int] = CALIBRATION_ITERATIONS,
    mode: EpsilonMode = EpsilonMode.PER_SIDE,
    min_rounds: int = CALIBRATION_MIN_ROUNDS,
) -> CalibrationParams:
    """Smallest ε, then largest τ, then smallest n with zero ground-truth errors.

    Each trace is judged on its first n rounds; n values longer than the
    shortest trace are skipped.
    """
    inside = [t for t in traces if t.inside]
    if not any(len(t.estimates) >= min_rounds for t in inside):
        raise CalibrationError(f"need an inside ground-truth node with at least {min_rounds} rounds")
    shortest = min(len(t.estimates) for t in traces)
    usable_n = sorted(n for n in iterations if n <= shortest)
    if not usable_n:
        raise CalibrationError(f"traces ({shortest} rounds) shorter than every candidate n {tuple(iterations)}")

    excesses = [_excesses(t) for t in traces]
    inside_total = len(inside)
    outside_total = len(traces) - inside_total
    best: Confusion | None = None

    for epsilon in sorted(epsilons):
        slack = side_slack(epsilon, mode)
        counts = [
            _cumulative_counts(ex, epsilon_area(t.baseline, epsilon, mode=mode), slack)
            for t, ex in zip(traces, excesses, strict=True)
        ]
        for tau in sorted(taus, reverse=True):
            for n in usable_n:
                params = CalibrationParams(epsilon_ms=epsilon, n=n, tau=tau)
                false_rejects = false_accepts = 0
                for trace, (valid, passed) in zip(traces, counts, strict=True):
                    accepted = vote(int(passed[n - 1]), int(valid[n - 1]), params) is Outcome.ACCEPTED
                    if trace.inside and not accepted:
                        false_rejects += 1
                    elif not trace.inside and accepted:
                        false_accepts += 1
                confusion = Confusion(params, false_rejects, false_accepts, inside_total, outside_total)
                if confusion.errors == 0:
                    logger.info(
                        "CALIBRATED: epsilon=%s n=%s tau=%s inside=%s outside=%s",
                        epsilon,
                        n,
                        tau,
                        inside_total,
                        outside_total,
                    )
                    return params
                if best is None or confusion.errors < best.errors:
                    best = confusion

    assert best is not None
    logger.warning(
        "CALIBRATION_FAILED: false_rejects=%s false_accepts=%s params=%s",
        best.false_rejects,
        best.false_accepts,
        best.params,
    )
    raise CalibrationFailed(best)


def calibrate_slv_epsilon(
    cases: Sequence[tuple[bool, SlvMeasurement]],
    *,
    epsilons: Sequence[float] = CALIBRATION_EPSILONS_MS,
    rule: CircleRule = CircleRule.RIGHT_ANGLE,
) -> float:
    """Smallest ε_slv that passes every truthful server and fails every false one."""
    truthful_total = sum(1 for truthful, _ in cases if truthful)
    best: Confusion | None = None
    for epsilon in sorted(epsilons):
        false_rejects = false_accepts = 0
        for truthful, measurement in cases:
            try:
                passed = measurement.check(epsilon, rule=rule).passed
            except SlvIndeterminate:
                continue
            false_rejects += int(truthful and not passed)
            false_accepts += int(passed and not truthful)
        confusion = Confusion(None, false_rejects, false_accepts, truthful_total, len(cases) - truthful_total)
        if confusion.errors == 0:
            logger.info("SLV_CALIBRATED: epsilon=%s cases=%s", epsilon, len(cases))
            return epsilon
        if best is None or confusion.errors < best.errors:
            best = confusion
    if best is None:
        raise CalibrationError("no candidate epsilon values")
    raise CalibrationFailed(best)
