"""
TOFU location pins keyed by domain and quantized location cell.

On disk a store directory holds two JSON-lines files:
  pins.snapshot.jsonl  — full state as of the last compaction
  pins.log.jsonl       — puts appended since then

Line format (one object per line):
  {"domain": "example.org", "cell_lat": 45.0, "cell_lon": -76.0,
   "first_verified": 1700000000000, "last_verified": 1700000300000}
Timestamps are milliseconds since the Unix epoch.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from pathlib import Path
from typing import Final

import msgspec

from geoverity.db.base import RecordLog, RecordLogCorrupt
from geoverity.services.config import PIN_SNAPSHOT_EVERY

logger = logging.getLogger(__name__)

_SNAPSHOT_NAME: Final[str] = "pins.snapshot.jsonl"
_LOG_NAME: Final[str] = "pins.log.jsonl"

PinKey = tuple[str, float, float]


class PinStoreCorrupt(RuntimeError):
    pass


class PinRecord(msgspec.Struct, kw_only=True, frozen=True):
    domain: str
    cell_lat: float
    cell_lon: float
    first_verified: int
    last_verified: int

    @property
    def key(self) -> PinKey:
        return _key(self.domain, self.cell_lat, self.cell_lon)


def _key(domain: str, cell_lat: float, cell_lon: float) -> PinKey:
    return (domain.lower().rstrip("."), round(cell_lat, 6), round(cell_lon, 6))


class PinStore:
    """Pins held in memory and mirrored to disk; ``directory=None`` keeps them in memory only."""

    def __init__(
        self,
        directory: Path | None = None,
        *,
        repair: bool = False,
        snapshot_every: int = PIN_SNAPSHOT_EVERY,
    ) -> None:
        self._pins: dict[PinKey, PinRecord] = {}
        self._snapshot_every = snapshot_every
        self._appended = 0
        self._snapshot: RecordLog[PinRecord] | None = None
        self._log: RecordLog[PinRecord] | None = None
        if directory is not None:
            self._snapshot = RecordLog(directory / _SNAPSHOT_NAME, PinRecord)
            self._log = RecordLog(directory / _LOG_NAME, PinRecord)
            self._load(repair=repair)

    def _load(self, *, repair: bool) -> None:
        assert self._snapshot is not None and self._log is not None
        try:
            records = [*self._snapshot.replay(), *self._log.replay()]
        except RecordLogCorrupt as exc:
            if not repair:
                raise PinStoreCorrupt(
                    f"pin store is corrupt ({exc}); restart with repair enabled to drop bad lines"
                ) from exc
            logger.warning("PIN_STORE_REPAIR: path=%s line=%s", exc.path, exc.line_no)
            records = [
                *self._snapshot.replay(skip_corrupt=True),
                *self._log.replay(skip_corrupt=True),
            ]
            self._merge_all(records)
            self.compact()
            return
        self._merge_all(records)
        logger.info("PIN_STORE_LOADED: pins=%s", len(self._pins))

    def _merge_all(self, records: list[PinRecord]) -> None:
        for record in records:
            self._merge(record)

    def _merge(self, record: PinRecord) -> PinRecord:
        existing = self._pins.get(record.key)
        if existing is not None:
            record = PinRecord(
                domain=existing.domain,
                cell_lat=existing.cell_lat,
                cell_lon=existing.cell_lon,
                first_verified=min(existing.first_verified, record.first_verified),
                last_verified=max(existing.last_verified, record.last_verified),
            )
        self._pins[record.key] = record
        return record

    # ── queries ───────────────────────────────────────────────────────────────
    def __len__(self) -> int:
        return len(self._pins)

    def __iter__(self) -> Iterator[PinRecord]:
        return iter(sorted(self._pins.values(), key=lambda r: r.key))

    def lookup(self, domain: str) -> list[PinRecord]:
        wanted = domain.lower().rstrip(".")
        return [r for r in self if r.key[0] == wanted]

    def get(self, domain: str, cell_lat: float, cell_lon: float) -> PinRecord | None:
        return self._pins.get(_key(domain, cell_lat, cell_lon))

    # ── writes ────────────────────────────────────────────────────────────────
    def put_record(self, record: PinRecord) -> PinRecord:
        """Idempotent on (domain, cell); first/last verification times are merged."""
        record = PinRecord(
            domain=record.key[0],
            cell_lat=record.key[1],
            cell_lon=record.key[2],
            first_verified=record.first_verified,
            last_verified=record.last_verified,
        )
        merged = self._merge(record)
        if self._log is not None:
            self._log.append(merged)
            self._appended += 1
            if self._appended >= self._snapshot_every:
                self.compact()
        return merged

    def put(self, domain: str, cell_lat: float, cell_lon: float, *, now_ms: int) -> PinRecord:
        return self.put_record(
            PinRecord(
                domain=domain,
                cell_lat=cell_lat,
                cell_lon=cell_lon,
                first_verified=now_ms,
                last_verified=now_ms,
            )
        )

    def expire(self, max_age_ms: int, *, now_ms: int) -> int:
        """Drop pins whose last verification is at least ``max_age_ms`` old."""
        stale = [k for k, r in self._pins.items() if now_ms - r.last_verified >= max_age_ms]
        for key in stale:
            del self._pins[key]
        if stale:
            logger.info("PIN_EXPIRE: removed=%s remaining=%s", len(stale), len(self._pins))
            self.compact()
        return len(stale)

    def compact(self) -> None:
        if self._snapshot is None or self._log is None:
            return
        self._snapshot.rewrite(self)
        self._log.truncate()
        self._appended = 0
