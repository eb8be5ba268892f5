"""
Line-delimited record logs — typed msgspec Structs stored as JSON lines.

Structure:
  RecordLog       — append-only file of one Struct type (append, replay, rewrite)
  encode_lines    — shared encoder for reports and snapshots
  decode_lines    — typed decoder for line-delimited input files

Usage:
  log = RecordLog(path, PinRecord)
  log.append(PinRecord(...))
  for record in log.replay():
      ...
"""

from __future__ import annotations

import logging
import os
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Final, Generic, TypeVar

import msgspec

logger = logging.getLogger(__name__)

T = TypeVar("T", bound=msgspec.Struct)

# ─── Shared encoder (thread-safe, reusable) ──────────────────────────────────
_ENC: Final[msgspec.json.Encoder] = msgspec.json.Encoder()


class RecordLogCorrupt(RuntimeError):
    def __init__(self, path: Path, line_no: int, reason: str) -> None:
        self.path = path
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")


def encode_line(record: msgspec.Struct) -> bytes:
    return _ENC.encode(record) + b"\n"


def encode_lines(records: Iterable[msgspec.Struct]) -> bytes:
    return b"".join(encode_line(r) for r in records)


def decode_lines(data: bytes, record_type: type[T], *, source: Path | str = "<bytes>") -> list[T]:
    decoder = msgspec.json.Decoder(record_type)
    records: list[T] = []
    for line_no, line in enumerate(data.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(decoder.decode(line))
        except msgspec.DecodeError as exc:
            raise RecordLogCorrupt(Path(source), line_no, str(exc)) from exc
    return records


class RecordLog(Generic[T]):
    """Append-only JSON-lines file; a single writer per path."""

    def __init__(self, path: Path, record_type: type[T]) -> None:
        self.path = path
        self.record_type = record_type
        self._decoder = msgspec.json.Decoder(record_type)

    def exists(self) -> bool:
        return self.path.exists()

    def append(self, record: T) -> None:
        self.append_many((record,))

    def append_many(self, records: Iterable[T]) -> None:
        payload = encode_lines(records)
        if not payload:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("ab") as fh:
            fh.write(payload)
            fh.flush()

    def replay(self, *, skip_corrupt: bool = False) -> Iterator[T]:
        """Yield stored records in order; undecodable lines raise unless skipped."""
        if not self.path.exists():
            return
        with self.path.open("rb") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    yield self._decoder.decode(line)
                except msgspec.DecodeError as exc:
                    if not skip_corrupt:
                        raise RecordLogCorrupt(self.path, line_no, str(exc)) from exc
                    logger.warning("RECORD_LOG_SKIP: path=%s line=%s reason=%s", self.path, line_no, exc)

    def rewrite(self, records: Iterable[T]) -> None:
        """Atomically replace the file contents."""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_bytes(encode_lines(records))
        os.replace(tmp, self.path)

    def truncate(self) -> None:
        self.rewrite(())
