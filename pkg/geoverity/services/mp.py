"""mp.py — Minimum-Pairs one-way delay estimation.

Each round every verifier in turn (A, then B, then C) emits a timestamp that the
client relays to the two other verifiers. The six relayed delays give three
pair sums; the smaller direction of each pair is kept and the linear system

    a + b = min(AtB, BtA)
    a + c = min(AtC, CtA)
    b + c = min(BtC, CtB)

is solved for the client's smaller one-way delays (a, b, c).
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Protocol

from geoverity.enums import RoundStatus
from geoverity.services.config import RELAY_TIMEOUT_MS

logger = logging.getLogger(__name__)

PairSums = tuple[float, float, float]


class MpError(RuntimeError):
    pass


class RelayTamperedError(MpError):
    def __init__(self, origin: str, observer: str, reason: str = "mac_fail") -> None:
        self.origin = origin
        self.observer = observer
        self.reason = reason
        super().__init__(f"relayed timestamp {origin}->{observer} rejected: {reason}")


@dataclass(frozen=True, slots=True)
class RawRelay:
    """One relayed timestamp as seen by the observer, before clock correction."""

    origin: str
    observer: str
    send_ts: float
    recv_ts: float


@dataclass(frozen=True, slots=True)
class RelayObservation:
    origin: str
    observer: str
    send_ts: float
    recv_ts: float
    clock_offset_correction: float
    seq: int

    def __post_init__(self) -> None:
        if self.origin == self.observer:
            raise MpError(f"origin and observer must differ: {self.origin}")

    @property
    def corrected_delay(self) -> float:
        return self.recv_ts - self.send_ts + self.clock_offset_correction

    @property
    def valid(self) -> bool:
        return self.corrected_delay >= 0.0


@dataclass(frozen=True, slots=True)
class PairwiseDelaySet:
    a_b: float
    a_c: float
    b_a: float
    b_c: float
    c_a: float
    c_b: float

    def __post_init__(self) -> None:
        if any(value < 0.0 for value in self.as_tuple()):
            raise MpError(f"relay delays must be non-negative: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.a_b, self.a_c, self.b_a, self.b_c, self.c_a, self.c_b)

    @classmethod
    def from_observations(
        cls,
        observations: list[RelayObservation],
        verifier_ids: tuple[str, str, str],
    ) -> PairwiseDelaySet | None:
        """None unless all six directed delays are present and valid."""
        a, b, c = verifier_ids
        delays: dict[tuple[str, str], float] = {}
        for obs in observations:
            if obs.valid:
                delays[(obs.origin, obs.observer)] = obs.corrected_delay
        try:
            return cls(
                a_b=delays[(a, b)],
                a_c=delays[(a, c)],
                b_a=delays[(b, a)],
                b_c=delays[(b, c)],
                c_a=delays[(c, a)],
                c_b=delays[(c, b)],
            )
        except KeyError:
            return None


@dataclass(frozen=True, slots=True)
class OwdEstimate:
    a: float
    b: float
    c: float
    valid: bool = True

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.a, self.b, self.c)


def min_pairs(delays: PairwiseDelaySet) -> PairSums:
    """Return (sum_ab, sum_ac, sum_bc), each the smaller direction of its pair."""
    return (
        min(delays.a_b, delays.b_a),
        min(delays.a_c, delays.c_a),
        min(delays.b_c, delays.c_b),
    )


def solve_owd(sums: PairSums) -> OwdEstimate:
    sum_ab, sum_ac, sum_bc = sums
    a = (sum_ab + sum_ac - sum_bc) / 2.0
    b = (sum_ab + sum_bc - sum_ac) / 2.0
    c = (sum_ac + sum_bc - sum_ab) / 2.0
    # negative legs are not clamped; the iteration is dropped from the vote
    return OwdEstimate(a=a, b=b, c=c, valid=min(a, b, c) >= 0.0)


def rtt_half_estimate(delays: PairwiseDelaySet) -> OwdEstimate:
    """RTT/2 style estimate: each pair sum is the mean of both directions."""
    return solve_owd(
        (
            (delays.a_b + delays.b_a) / 2.0,
            (delays.a_c + delays.c_a) / 2.0,
            (delays.b_c + delays.c_b) / 2.0,
        )
    )


# ─── Rounds ───────────────────────────────────────────────────────────────────


class MpSession(Protocol):
    """Transport-side view of one client session across three verifiers."""

    session_id: str
    verifier_ids: tuple[str, str, str]

    def offset_corrections(self) -> Mapping[tuple[str, str], float]:
        """Correction per (origin, observer), added to recv_ts - send_ts."""
        ...

    async def run_turn(self, seq: int, origin: str, *, timeout_ms: float) -> list[RawRelay]:
        """Emit origin's timestamp for ``seq`` and collect the relays that arrived in time.

        Raises RelayTamperedError when any relayed frame fails authentication.
        """
        ...

    async def pause(self, ms: float) -> None: ...


@dataclass(slots=True)
class MpRound:
    seq: int
    status: RoundStatus
    observations: list[RelayObservation] = field(default_factory=list)
    delays: PairwiseDelaySet | None = None

    @property
    def estimate(self) -> OwdEstimate | None:
        if self.delays is None:
            return None
        return solve_owd(min_pairs(self.delays))


async def run_mp_round(
    session: MpSession,
    seq: int,
    *,
    timeout_ms: float = RELAY_TIMEOUT_MS,
) -> MpRound:
    """Drive one A→B→C round; incomplete or tampered rounds carry no delay set."""
    # offsets are held constant for the whole round
    corrections = dict(session.offset_corrections())
    observations: list[RelayObservation] = []
    for origin in session.verifier_ids:
        try:
            relays = await session.run_turn(seq, origin, timeout_ms=timeout_ms)
        except RelayTamperedError as exc:
            logger.warning(
                "MP_TAMPERED: session=%s seq=%s origin=%s observer=%s reason=%s",
                session.session_id,
                seq,
                exc.origin,
                exc.observer,
                exc.reason,
            )
            return MpRound(seq=seq, status=RoundStatus.TAMPERED, observations=observations)
        for relay in relays:
            observations.append(
                RelayObservation(
                    origin=relay.origin,
                    observer=relay.observer,
                    send_ts=relay.send_ts,
                    recv_ts=relay.recv_ts,
                    clock_offset_correction=corrections.get((relay.origin, relay.observer), 0.0),
                    seq=seq,
                )
            )

    delays = PairwiseDelaySet.from_observations(observations, session.verifier_ids)
    if delays is None:
        logger.info(
            "MP_ROUND: session=%s seq=%s status=incomplete observations=%s",
            session.session_id,
            seq,
            len(observations),
        )
        return MpRound(seq=seq, status=RoundStatus.INCOMPLETE, observations=observations)

    logger.debug("MP_ROUND: session=%s seq=%s status=complete", session.session_id, seq)
    return MpRound(seq=seq, status=RoundStatus.COMPLETE, observations=observations, delays=delays)
