"""Tests for geoverity.services.calibration."""

import math

import pytest

from geoverity.db.results import TraceRecord
from geoverity.services.calibration import (
    CalibrationError,
    CalibrationFailed,
    GroundTruthTrace,
    calibrate,
)
from geoverity.services.cpv import CalibrationParams
from geoverity.services.mp import OwdEstimate

BASELINE = (10.0, 10.0, 10.0)
R = 10.0 / math.sqrt(3.0)
CENTRE = OwdEstimate(R, R, R)
FAR = OwdEstimate(20.0, 20.0, 20.0)


def _trace(node_id, inside, estimates):
    return GroundTruthTrace(node_id=node_id, inside=inside, baseline=BASELINE, estimates=tuple(estimates))


def test_clean_separation_picks_tightest_params():
    traces = [_trace("in", True, [CENTRE] * 100), _trace("out", False, [FAR] * 100)]
    assert calibrate(traces) == CalibrationParams(epsilon_ms=0.0, n=10, tau=0.9)


def test_twenty_percent_failures_lower_tau():
    estimates = [FAR if i % 5 == 4 else CENTRE for i in range(100)]
    params = calibrate([_trace("in", True, estimates)])
    assert params.tau <= 0.8
    assert params.epsilon_ms == 0.0


def test_missing_rounds_do_not_count_toward_the_vote():
    estimates = [None if i % 2 else CENTRE for i in range(100)]
    params = calibrate([_trace("in", True, estimates)])
    assert params == CalibrationParams(epsilon_ms=0.0, n=10, tau=0.9)


def test_needs_enough_inside_rounds():
    with pytest.raises(CalibrationError):
        calibrate([_trace("in", True, [CENTRE] * 10)])


def test_needs_an_inside_node():
    with pytest.raises(CalibrationError):
        calibrate([_trace("out", False, [FAR] * 100)])


def test_inseparable_ground_truth_reports_best_confusion():
    # an outside node that looks exactly like the inside one
    traces = [_trace("in", True, [CENTRE] * 20), _trace("out", False, [CENTRE] * 20)]
    with pytest.raises(CalibrationFailed) as info:
        calibrate(traces, iterations=(10, 20))
    best = info.value.best
    assert best.errors == 1
    assert best.inside_total == 1 and best.outside_total == 1


def test_trace_record_replays_into_estimates():
    s = 2 * R
    record = TraceRecord(
        node_id="n1",
        triangle_id="t1",
        inside=True,
        baseline=BASELINE,
        rounds=[[s] * 6, None],
    )
    trace = GroundTruthTrace.from_record(record)
    assert trace.baseline == BASELINE
    assert trace.estimates[1] is None
    assert trace.estimates[0].as_tuple() == pytest.approx((R, R, R))
