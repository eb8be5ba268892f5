"""middlebox.py — queueing of relayed puzzles at an illicit middlebox.

A middlebox relaying for many clients must solve one puzzle per client per
verifier turn. Puzzles are served first-come first-served by ``cores``
parallel solvers; each solve takes a geometric number of hash attempts
(mean 2^k) at ``core_hash_rate`` hashes per ms.
"""

from __future__ import annotations

import heapq
import logging
from collections.abc import Iterable
from dataclasses import dataclass, field

import numpy as np

from geoverity.db.results import MiddleboxRecord

logger = logging.getLogger(__name__)


class MiddleboxParamsError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class MiddleboxParams:
    clients: int
    difficulty: int
    cores: int
    core_hash_rate: float
    rounds: int
    inter_round_ms: float
    turns_per_round: int = 3
    turn_gap_ms: float = 0.0

    def __post_init__(self) -> None:
        if min(self.clients, self.cores, self.rounds, self.turns_per_round) < 1:
            raise MiddleboxParamsError("clients, cores, rounds and turns must be positive")
        if self.difficulty < 0 or self.core_hash_rate <= 0 or self.inter_round_ms <= 0:
            raise MiddleboxParamsError("difficulty, hash rate and round interval out of range")

    @property
    def mean_service_ms(self) -> float:
        return (1 << self.difficulty) / self.core_hash_rate

    @property
    def offered_load(self) -> float:
        """Puzzle work arriving per round divided by solver capacity per round."""
        work = self.clients * self.turns_per_round * self.mean_service_ms
        return work / (self.cores * self.inter_round_ms)


@dataclass(frozen=True, slots=True)
class QueuedPuzzle:
    round: int
    client_id: int
    turn: int
    arrival_ms: float
    added_delay_ms: float


@dataclass(slots=True)
class MiddleboxTrace:
    params: MiddleboxParams
    puzzles: list[QueuedPuzzle]
    _index: dict[tuple[int, int, int], float] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._index = {(p.round, p.client_id, p.turn): p.added_delay_ms for p in self.puzzles}

    def added_delay(self, round_index: int, client_id: int, turn: int) -> float:
        return self._index[(round_index, client_id, turn)]

    def mean_by_round(self) -> np.ndarray:
        sums = np.zeros(self.params.rounds)
        for p in self.puzzles:
            sums[p.round] += p.added_delay_ms
        return sums / (self.params.clients * self.params.turns_per_round)

    def to_records(self) -> list[MiddleboxRecord]:
        return [
            MiddleboxRecord(round=p.round, client_id=p.client_id, turn=p.turn, added_delay_ms=p.added_delay_ms)
            for p in self.puzzles
        ]


def simulate_middlebox(
    clients: int,
    difficulty: int,
    cores: int,
    core_hash_rate: float,
    rounds: int,
    inter_round_ms: float,
    *,
    turns_per_round: int = 3,
    turn_gap_ms: float = 0.0,
    seed: int = 0,
) -> MiddleboxTrace:
    """Discrete-event FIFO multi-server queue; returns queueing plus service delay per puzzle."""
    params = MiddleboxParams(
        clients=clients,
        difficulty=difficulty,
        cores=cores,
        core_hash_rate=core_hash_rate,
        rounds=rounds,
        inter_round_ms=inter_round_ms,
        turns_per_round=turns_per_round,
        turn_gap_ms=turn_gap_ms,
    )
    rng = np.random.default_rng(seed)
    success = 1.0 / (1 << difficulty)
    free_at = [0.0] * cores
    heapq.heapify(free_at)

    puzzles: list[QueuedPuzzle] = []
    for r in range(rounds):
        for turn in range(turns_per_round):
            arrival = r * inter_round_ms + turn * turn_gap_ms
            # clients' puzzles land in the same burst; their order is random
            order = rng.permutation(clients)
            attempts = rng.geometric(success, size=clients)
            for client_id, hashes in zip(order, attempts, strict=True):
                start = max(arrival, heapq.heappop(free_at))
                finish = start + float(hashes) / core_hash_rate
                heapq.heappush(free_at, finish)
                puzzles.append(
                    QueuedPuzzle(
                        round=r,
                        client_id=int(client_id),
                        turn=turn,
                        arrival_ms=arrival,
                        added_delay_ms=finish - arrival,
                    )
                )

    trace = MiddleboxTrace(params=params, puzzles=puzzles)
    logger.debug(
        "MIDDLEBOX_SIM: clients=%s k=%s cores=%s load=%.3f last_round_mean=%.3f",
        clients,
        difficulty,
        cores,
        params.offered_load,
        float(trace.mean_by_round()[-1]),
    )
    return trace


def delay_growth(trace: MiddleboxTrace) -> float:
    """Mean added delay over the last quarter of rounds minus the first quarter."""
    per_round = trace.mean_by_round()
    quarter = max(1, len(per_round) // 4)
    return float(per_round[-quarter:].mean() - per_round[:quarter].mean())


@dataclass(frozen=True, slots=True)
class SweepPoint:
    difficulty: int
    cores: int
    offered_load: float
    mean_added_delay_ms: float
    last_round_mean_ms: float


def sweep_middlebox(
    clients: int,
    difficulties: Iterable[int],
    cores_options: Iterable[int],
    core_hash_rate: float,
    rounds: int,
    inter_round_ms: float,
    *,
    seed: int = 0,
) -> list[SweepPoint]:
    """Sensitivity of added delay to difficulty and to solver count."""
    points: list[SweepPoint] = []
    cores_list = list(cores_options)
    for difficulty in difficulties:
        for cores in cores_list:
            trace = simulate_middlebox(
                clients, difficulty, cores, core_hash_rate, rounds, inter_round_ms, seed=seed
            )
            per_round = trace.mean_by_round()
            points.append(
                SweepPoint(
                    difficulty=difficulty,
                    cores=cores,
                    offered_load=trace.params.offered_load,
                    mean_added_delay_ms=float(per_round.mean()),
                    last_round_mean_ms=float(per_round[-1]),
                )
            )
    return points
