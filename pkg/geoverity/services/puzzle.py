"""puzzle.py — proof-of-work puzzles bound to relayed timestamp messages.

A puzzle is solved when SHA-256(nonce ‖ binding ‖ solution) starts with at
least ``difficulty`` zero bits. Solutions are counter values encoded as
minimal big-endian bytes (0 encodes as the empty string).
"""

from __future__ import annotations

import hashlib
import logging
import secrets
from dataclasses import dataclass

from geoverity.services.config import (
    PUZZLE_CAP_EXTRA_BITS,
    PUZZLE_MAX_DIFFICULTY,
    PUZZLE_NONCE_BYTES,
)

logger = logging.getLogger(__name__)

DIGEST_BITS = 256


class PuzzleError(ValueError):
    pass


class PuzzleExhaustedError(PuzzleError):
    def __init__(self, difficulty: int, attempts: int) -> None:
        self.difficulty = difficulty
        self.attempts = attempts
        super().__init__(f"no solution for difficulty {difficulty} within {attempts} attempts")


@dataclass(frozen=True, slots=True)
class PuzzleSpec:
    nonce: bytes
    difficulty: int
    binding: bytes

    def __post_init__(self) -> None:
        if not 0 <= self.difficulty <= PUZZLE_MAX_DIFFICULTY:
            raise PuzzleError(f"difficulty must be in [0, {PUZZLE_MAX_DIFFICULTY}]: {self.difficulty}")
        if len(self.nonce) != PUZZLE_NONCE_BYTES:
            raise PuzzleError(f"nonce must be {PUZZLE_NONCE_BYTES} bytes")


@dataclass(frozen=True, slots=True)
class PuzzleSolution:
    solution: bytes
    attempts: int = 1


def message_digest(message: bytes) -> bytes:
    return hashlib.sha256(message).digest()


def leading_zero_bits(digest: bytes) -> int:
    value = int.from_bytes(digest, "big")
    return len(digest) * 8 - value.bit_length()


def _meets(digest: bytes, difficulty: int) -> bool:
    if difficulty == 0:
        return True
    return int.from_bytes(digest, "big") >> (DIGEST_BITS - difficulty) == 0


def counter_bytes(counter: int) -> bytes:
    return counter.to_bytes((counter.bit_length() + 7) // 8, "big")


def attempt_cap(difficulty: int) -> int:
    return 1 << (difficulty + PUZZLE_CAP_EXTRA_BITS)


def puzzle_generate(binding: bytes, difficulty: int, *, nonce: bytes | None = None) -> PuzzleSpec:
    """``binding`` is the digest of the timestamp message the puzzle rides with."""
    return PuzzleSpec(
        nonce=nonce if nonce is not None else secrets.token_bytes(PUZZLE_NONCE_BYTES),
        difficulty=difficulty,
        binding=binding,
    )


def puzzle_solve(spec: PuzzleSpec, *, start: int = 0) -> PuzzleSolution:
    """Brute-force counters from ``start``; gives up after 2^(k+8) attempts."""
    prefix = hashlib.sha256(spec.nonce + spec.binding)
    cap = attempt_cap(spec.difficulty)
    for attempt in range(1, cap + 1):
        candidate = counter_bytes(start + attempt - 1)
        h = prefix.copy()
        h.update(candidate)
        if _meets(h.digest(), spec.difficulty):
            return PuzzleSolution(solution=candidate, attempts=attempt)
    logger.error("PUZZLE_EXHAUSTED: difficulty=%s attempts=%s", spec.difficulty, cap)
    raise PuzzleExhaustedError(spec.difficulty, cap)


def puzzle_verify(
    spec: PuzzleSpec,
    solution: PuzzleSolution | bytes,
    *,
    expected_binding: bytes | None = None,
) -> bool:
    """One hash evaluation; the binding must match the message actually received."""
    if expected_binding is not None and not secrets.compare_digest(expected_binding, spec.binding):
        return False
    raw = solution.solution if isinstance(solution, PuzzleSolution) else solution
    return _meets(hashlib.sha256(spec.nonce + spec.binding + raw).digest(), spec.difficulty)


def expected_attempts(difficulty: int) -> float:
    return float(1 << difficulty)
