"""clock.py — verifier clock offsets and baseline delays between verifiers.

A four-timestamp exchange (t1 request sent, t2 request received, t3 response
sent, t4 response received; t1/t4 on our clock, t2/t3 on the peer's) yields

    offset   = ((t2 - t1) + (t3 - t4)) / 2        peer clock minus ours
    forward  = t2 - t1 - offset                   corrected us → peer delay
    reverse  = t4 - t3 + offset                   corrected peer → us delay

The baseline for a pair is the minimum of min(forward, reverse) over a short
window of recent exchanges.
"""

from __future__ import annotations

import asyncio
import logging
import time
from collections import deque
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Protocol

import ntplib

from geoverity.services.config import BASELINE_PERIOD_S, BASELINE_STALENESS_MS, BASELINE_WINDOW, OFFSET_PERIOD_S

logger = logging.getLogger(__name__)

FourStamps = tuple[float, float, float, float]


class ClockSyncError(RuntimeError):
    pass


def estimate_offset(t1: float, t2: float, t3: float, t4: float) -> float:
    """Peer clock minus local clock, assuming symmetric paths."""
    return ((t2 - t1) + (t3 - t4)) / 2.0


def corrected_delays(stamps: FourStamps, offset_ms: float) -> tuple[float, float]:
    """(forward, reverse) one-way delays of an exchange under a known offset."""
    t1, t2, t3, t4 = stamps
    return t2 - t1 - offset_ms, t4 - t3 + offset_ms


def measure_baseline(stamps: FourStamps, offset_ms: float) -> float:
    return min(corrected_delays(stamps, offset_ms))


@dataclass(slots=True)
class BaselineWindow:
    size: int = BASELINE_WINDOW
    samples: deque[float] = field(default_factory=deque)
    measured_at_ms: float | None = None
    stale: bool = True

    def add(self, owd_ms: float, at_ms: float) -> float:
        self.samples.append(owd_ms)
        while len(self.samples) > self.size:
            self.samples.popleft()
        self.measured_at_ms = at_ms
        self.stale = False
        return self.value

    @property
    def value(self) -> float | None:
        return min(self.samples) if self.samples else None

    def is_fresh(self, now_ms: float, staleness_ms: float = BASELINE_STALENESS_MS) -> bool:
        if self.stale or self.measured_at_ms is None:
            return False
        return now_ms - self.measured_at_ms <= staleness_ms


@dataclass(slots=True)
class PeerSync:
    peer: str
    offset_ms: float = 0.0
    offset_measured_at_ms: float | None = None
    offset_source: str = "none"
    offset_aged: bool = True
    baseline: BaselineWindow = field(default_factory=BaselineWindow)


class ClockSyncState:
    """Per-peer offsets and baselines of one verifier.

    Samplers replace entries wholesale; readers take a ``snapshot``.
    """

    def __init__(
        self,
        own_id: str,
        peers: list[str],
        *,
        window: int = BASELINE_WINDOW,
        static_offsets: Mapping[str, float] | None = None,
    ) -> None:
        self.own_id = own_id
        self.peers: dict[str, PeerSync] = {
            peer: PeerSync(peer=peer, baseline=BaselineWindow(size=window)) for peer in peers
        }
        self.static_offsets = dict(static_offsets or {})
        for peer, offset in self.static_offsets.items():
            self._peer(peer).offset_ms = offset
            self._peer(peer).offset_source = "static"
            self._peer(peer).offset_aged = False

    def _peer(self, peer: str) -> PeerSync:
        try:
            return self.peers[peer]
        except KeyError:
            raise ClockSyncError(f"unknown peer: {peer}") from None

    def offset(self, peer: str) -> float:
        return self._peer(peer).offset_ms

    def correction_for(self, origin: str) -> float:
        """Added to (recv - send) for a frame stamped by ``origin`` and received here."""
        if origin == self.own_id:
            return 0.0
        return self.offset(origin)

    def record_offset(self, peer: str, offset_ms: float, at_ms: float, *, source: str = "estimator") -> None:
        entry = self._peer(peer)
        if peer in self.static_offsets:
            return
        entry.offset_ms = offset_ms
        entry.offset_measured_at_ms = at_ms
        entry.offset_source = source
        entry.offset_aged = False

    def mark_offset_aged(self, peer: str) -> None:
        self._peer(peer).offset_aged = True

    def record_exchange(self, peer: str, stamps: FourStamps, *, update_offset: bool = False) -> float:
        """Feed one four-timestamp exchange; returns the windowed baseline."""
        if update_offset:
            self.record_offset(peer, estimate_offset(*stamps), stamps[3])
        entry = self._peer(peer)
        return entry.baseline.add(measure_baseline(stamps, entry.offset_ms), stamps[3])

    def mark_stale(self, peer: str) -> None:
        self._peer(peer).baseline.stale = True

    def baseline(self, peer: str) -> BaselineWindow:
        return self._peer(peer).baseline

    def snapshot(self) -> dict[str, tuple[float, float | None, float | None, bool]]:
        """peer -> (offset, baseline, measured_at, stale)."""
        return {
            peer: (p.offset_ms, p.baseline.value, p.baseline.measured_at_ms, p.baseline.stale)
            for peer, p in self.peers.items()
        }


# ─── Clock source ─────────────────────────────────────────────────────────────


class ClockSource:
    """Wall clock in ms, optionally disciplined by an NTP offset."""

    def __init__(self, ntp_server: str = "") -> None:
        self.ntp_server = ntp_server
        self.ntp_offset_ms = 0.0

    def now_ms(self) -> int:
        return int(time.time() * 1000.0 + self.ntp_offset_ms)

    async def refresh_ntp(self) -> float:
        if not self.ntp_server:
            raise ClockSyncError("no NTP server configured")
        response = await asyncio.to_thread(ntplib.NTPClient().request, self.ntp_server, version=3)
        self.ntp_offset_ms = response.offset * 1000.0
        logger.info("NTP_OFFSET: server=%s offset_ms=%.3f", self.ntp_server, self.ntp_offset_ms)
        return self.ntp_offset_ms


# ─── Background samplers ──────────────────────────────────────────────────────


class PeerLink(Protocol):
    peer_id: str

    async def exchange(self, *, timeout_s: float) -> FourStamps:
        """One request/response timestamp exchange with the peer."""
        ...


async def sample_peer(
    state: ClockSyncState,
    link: PeerLink,
    *,
    update_offset: bool,
    timeout_s: float,
) -> float | None:
    try:
        stamps = await link.exchange(timeout_s=timeout_s)
    except (TimeoutError, asyncio.TimeoutError, OSError, ConnectionError) as exc:
        logger.warning("SYNC_TIMEOUT: peer=%s reason=%s", link.peer_id, type(exc).__name__)
        state.mark_stale(link.peer_id)
        if update_offset:
            state.mark_offset_aged(link.peer_id)
        return None
    baseline = state.record_exchange(link.peer_id, stamps, update_offset=update_offset)
    logger.debug("SYNC_SAMPLE: peer=%s baseline=%.3f offset=%.3f", link.peer_id, baseline, state.offset(link.peer_id))
    return baseline


def start_sync_workers(
    state: ClockSyncState,
    links: list[PeerLink],
    clock: ClockSource,
    *,
    baseline_period_s: float = BASELINE_PERIOD_S,
    offset_period_s: float = OFFSET_PERIOD_S,
    timeout_s: float = 2.0,
    offset_links: list[PeerLink] | None = None,
) -> list[asyncio.Task]:
    """Baseline sampler per peer plus one offset refresher (over ``offset_links`` when given)."""
    offset_links = offset_links or links

    async def _baseline_loop(link: PeerLink) -> None:
        logger.info("Baseline sampler started: peer=%s period=%ss", link.peer_id, baseline_period_s)
        while True:
            try:
                await sample_peer(state, link, update_offset=False, timeout_s=timeout_s)
            except Exception:
                logger.exception("Baseline sample failed: peer=%s", link.peer_id)
            await asyncio.sleep(baseline_period_s)

    async def _offset_loop() -> None:
        logger.info("Offset refresher started: period=%ss ntp=%s", offset_period_s, clock.ntp_server or "-")
        while True:
            try:
                if clock.ntp_server:
                    # both ends follow NTP, so peer offsets collapse to zero
                    await clock.refresh_ntp()
                    for link in offset_links:
                        state.record_offset(link.peer_id, 0.0, clock.now_ms(), source="ntp")
                else:
                    for link in offset_links:
                        await sample_peer(state, link, update_offset=True, timeout_s=timeout_s)
            except Exception:
                logger.exception("Offset refresh failed")
            await asyncio.sleep(offset_period_s)

    tasks = [asyncio.create_task(_offset_loop(), name="clock-offset")]
    tasks.extend(
        asyncio.create_task(_baseline_loop(link), name=f"baseline-{link.peer_id}") for link in links
    )
    return tasks
