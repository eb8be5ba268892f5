"""Tests for geoverity.services.puzzle and geoverity.services.middlebox."""

import functools

import numpy as np
import pytest

from geoverity.services.middlebox import (
    MiddleboxParamsError,
    delay_growth,
    simulate_middlebox,
    sweep_middlebox,
)
from geoverity.services.puzzle import (
    PuzzleError,
    PuzzleSolution,
    leading_zero_bits,
    message_digest,
    puzzle_generate,
    puzzle_solve,
    puzzle_verify,
)

BINDING = message_digest(b"timestamp frame")


def _spec(i, k, binding=BINDING):
    return puzzle_generate(binding, k, nonce=i.to_bytes(16, "big"))


@functools.lru_cache
def _mean_attempts(k, count=1000):
    return np.mean([puzzle_solve(_spec(i, k)).attempts for i in range(count)])


# ─── puzzle ───────────────────────────────────────────────────────────────────


def test_difficulty_zero_accepts_anything():
    spec = puzzle_generate(BINDING, 0)
    assert puzzle_verify(spec, b"")
    assert puzzle_verify(spec, b"whatever")
    assert puzzle_solve(spec) == PuzzleSolution(solution=b"", attempts=1)


def test_fresh_nonces():
    assert puzzle_generate(BINDING, 8).nonce != puzzle_generate(BINDING, 8).nonce


def test_generate_is_deterministic_given_nonce():
    assert _spec(3, 8) == _spec(3, 8)


def test_difficulty_bounds():
    with pytest.raises(PuzzleError):
        puzzle_generate(BINDING, 41)
    with pytest.raises(PuzzleError):
        puzzle_generate(BINDING, -1)
    with pytest.raises(PuzzleError):
        puzzle_generate(BINDING, 8, nonce=b"short")


@pytest.mark.parametrize("k", [1, 6, 10])
def test_solution_verifies(k):
    for i in range(20):
        spec = _spec(i, k)
        solution = puzzle_solve(spec)
        assert puzzle_verify(spec, solution)
        digest = message_digest(spec.nonce + spec.binding + solution.solution)
        assert leading_zero_bits(digest) >= k


@pytest.mark.parametrize("k", [4, 8, 12])
def test_mean_attempts_close_to_two_to_the_k(k):
    mean = _mean_attempts(k)
    assert 0.8 * 2**k <= mean <= 1.2 * 2**k


def test_attempts_double_per_difficulty_step():
    slope = (np.log2(_mean_attempts(10)) - np.log2(_mean_attempts(6))) / 4
    assert 0.8 <= slope <= 1.2


def test_difficulty_ten_mean_attempts():
    assert 512 <= _mean_attempts(10) <= 2048


def test_flipped_bit_fails():
    rejected = 0
    total = 200
    for i in range(total):
        spec = _spec(i, 8)
        solution = puzzle_solve(spec, start=1).solution
        flipped = bytes([solution[0] ^ 0x01]) + solution[1:]
        rejected += not puzzle_verify(spec, flipped)
    assert rejected / total >= 0.95


def test_binding_mismatch_fails():
    spec = _spec(0, 8)
    solution = puzzle_solve(spec)
    assert puzzle_verify(spec, solution, expected_binding=BINDING)
    assert not puzzle_verify(spec, solution, expected_binding=message_digest(b"another frame"))


# ─── middlebox ────────────────────────────────────────────────────────────────


def test_single_client_sees_only_service_time():
    trace = simulate_middlebox(1, 8, 1, 100.0, 200, 300.0, turn_gap_ms=100.0, seed=1)
    service = 2**8 / 100.0
    assert np.mean([p.added_delay_ms for p in trace.puzzles]) == pytest.approx(service, rel=0.2)
    assert abs(delay_growth(trace)) < service


def test_overload_grows_without_bound():
    trace = simulate_middlebox(100, 8, 1, 100.0, 40, 300.0, seed=2)
    assert trace.params.offered_load > 1.0
    per_round = trace.mean_by_round()
    assert per_round[-1] > per_round[0]
    assert delay_growth(trace) > 10 * trace.params.mean_service_ms
    # every round starts later than the one before
    assert np.all(np.diff(per_round[::5]) > 0)


def test_half_load_is_stable():
    trace = simulate_middlebox(20, 8, 1, 100.0, 200, 307.2, seed=3)
    assert trace.params.offered_load == pytest.approx(0.5)
    per_round = trace.mean_by_round()
    assert abs(delay_growth(trace)) < 0.25 * per_round.mean()


def test_trace_records_cover_every_puzzle():
    trace = simulate_middlebox(5, 4, 2, 100.0, 3, 300.0)
    records = trace.to_records()
    assert len(records) == 5 * 3 * 3
    first = records[0]
    assert trace.added_delay(first.round, first.client_id, first.turn) == first.added_delay_ms


def test_simulation_is_seeded():
    a = simulate_middlebox(10, 6, 2, 100.0, 10, 300.0, seed=9)
    b = simulate_middlebox(10, 6, 2, 100.0, 10, 300.0, seed=9)
    assert a.to_records() == b.to_records()


def test_invalid_params():
    with pytest.raises(MiddleboxParamsError):
        simulate_middlebox(0, 8, 1, 100.0, 10, 300.0)
    with pytest.raises(MiddleboxParamsError):
        simulate_middlebox(1, 8, 1, 0.0, 10, 300.0)


def test_sweep_reports_both_sensitivities():
    points = sweep_middlebox(30, [4, 10], [1, 4], 100.0, 20, 300.0, seed=4)
    assert [(p.difficulty, p.cores) for p in points] == [(4, 1), (4, 4), (10, 1), (10, 4)]
    by_key = {(p.difficulty, p.cores): p for p in points}
    assert by_key[(10, 4)].mean_added_delay_ms <= by_key[(10, 1)].mean_added_delay_ms
    assert by_key[(10, 1)].mean_added_delay_ms > by_key[(4, 1)].mean_added_delay_ms
