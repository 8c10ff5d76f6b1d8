"""Append-only JSONL persistence for the response, sensor, and dispatch streams.

Layout: one line-delimited JSON file per stream per UTC day of the record
timestamp (``<stream>-YYYYMMDD.jsonl``) under ``<root>/streams``, plus a
sidecar offset index (``.idx``) that is rebuilt on startup when missing or
stale. Records are immutable; ids increase by one per stream in arrival
order. A single lock per stream serializes appends; readers work from the
index snapshot and never see partial lines.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

from .timeutil import format_utc_ms

log = logging.getLogger(__name__)

STREAMS = ("responses", "sensor", "dispatches")

# Shallow per-stream schemas: field name -> required type(s). The service and
# importers validate deeply before appending; this is the store's own guard.
_SCHEMAS: dict[str, dict[str, type | tuple[type, ...]]] = {
    "responses": {
        "participantId": str,
        "surveyId": str,
        "surveyVersion": int,
        "startedAt": str,
        "submittedAt": str,
        "answers": dict,
    },
    "sensor": {
        "loggerId": str,
        "locationLabel": str,
        "timestamp": str,
        "dryBulbTempC": (int, float),
        "relativeHumidityPct": (int, float),
    },
    "dispatches": {
        "ruleId": str,
        "participantId": str,
        "providerStatus": str,
    },
}


class StoreError(Exception):
    pass


class UnknownStreamError(StoreError):
    pass


class SchemaViolationError(StoreError):
    pass


class InvalidRangeError(StoreError):
    pass


@dataclass(frozen=True)
class StreamRecord:
    stream: str
    record_id: int
    timestamp: int
    body: dict[str, Any]


# Widest timestamp (about year 5138) used for unbounded queries and day
# pruning; keeps datetime.fromtimestamp in range.
_TS_SPAN = 10**14


def _day_of(ts_ms: int) -> str:
    return datetime.fromtimestamp(ts_ms // 1000, tz=timezone.utc).strftime("%Y%m%d")


class _DayFile:
    """One stream-day JSONL file plus its in-memory (timestamp, offset) index."""

    def __init__(self, path: Path):
        self.path = path
        self.index: list[tuple[int, int, int]] = []  # (ts_ms, offset, record_id)
        self._fh = None

    def recover(self) -> None:
        """Drop a torn tail line, then load or rebuild the offset index."""
        size = self._truncate_partial_tail()
        idx_path = self.path.with_suffix(".jsonl.idx")
        if idx_path.exists():
            try:
                doc = json.loads(idx_path.read_text("utf-8"))
                entries = [(int(t), int(o), int(r)) for t, o, r in doc["entries"]]
                if int(doc.get("size", -1)) == size:
                    self.index = entries
                    return
            except (ValueError, KeyError, TypeError):
                log.warning("unreadable index %s; rebuilding", idx_path)
        self._rebuild_index()

    def _truncate_partial_tail(self) -> int:
        size = self.path.stat().st_size
        if size == 0:
            return 0
        with open(self.path, "rb+") as fh:
            fh.seek(max(0, size - 1))
            if fh.read(1) == b"\n":
                return size
            data = self.path.read_bytes()
            cut = data.rfind(b"\n") + 1
            log.warning("truncating %d partial byte(s) at end of %s", size - cut, self.path)
            fh.truncate(cut)
            return cut

    def _rebuild_index(self) -> None:
        self.index = []
        offset = 0
        with open(self.path, "rb") as fh:
            for line in fh:
                if line.endswith(b"\n"):
                    try:
                        doc = json.loads(line)
                        self.index.append((int(doc["_ts"]), offset, int(doc["id"])))
                    except (ValueError, KeyError):
                        log.warning("skipping unparseable line at offset %d in %s",
                                    offset, self.path)
                offset += len(line)
        self.write_index()

    def write_index(self) -> None:
        idx_path = self.path.with_suffix(".jsonl.idx")
        tmp = idx_path.with_suffix(".idx.tmp")
        size = self.path.stat().st_size if self.path.exists() else 0
        tmp.write_text(json.dumps({"size": size, "entries": self.index}), "utf-8")
        os.replace(tmp, idx_path)

    def handle(self):
        if self._fh is None:
            self._fh = open(self.path, "ab")
            self._fh.seek(0, os.SEEK_END)
        return self._fh

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class StreamStore:
    """Durable append/query access to the three artifact streams."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.streams_dir = self.root / "streams"
        self.streams_dir.mkdir(parents=True, exist_ok=True)
        self._locks = {stream: threading.Lock() for stream in STREAMS}
        self._files: dict[str, dict[str, _DayFile]] = {s: {} for s in STREAMS}
        self._next_id: dict[str, int] = {}
        for stream in STREAMS:
            self._recover_stream(stream)

    # -- startup -----------------------------------------------------------

    def _recover_stream(self, stream: str) -> None:
        max_id = 0
        for path in sorted(self.streams_dir.glob(f"{stream}-*.jsonl")):
            day = path.stem.rsplit("-", 1)[1]
            day_file = _DayFile(path)
            day_file.recover()
            self._files[stream][day] = day_file
            if day_file.index:
                max_id = max(max_id, max(r for _, _, r in day_file.index))
        self._next_id[stream] = max_id + 1

    # -- writes ------------------------------------------------------------

    def append(self, stream: str, timestamp_ms: int, body: Mapping[str, Any],
               fsync: bool = True) -> int:
        """Append one record; durable before return when ``fsync`` is set."""
        self._check_stream(stream)
        self._check_body(stream, body)
        with self._locks[stream]:
            return self._append_locked(stream, timestamp_ms, body, fsync)

    def append_batch(self, stream: str,
                     items: Iterable[tuple[int, Mapping[str, Any]]]) -> list[int]:
        """Append many records with one fsync per touched file at the end."""
        self._check_stream(stream)
        items = list(items)
        for _, body in items:
            self._check_body(stream, body)
        ids: list[int] = []
        touched: set[str] = set()
        with self._locks[stream]:
            for timestamp_ms, body in items:
                ids.append(self._append_locked(stream, timestamp_ms, body,
                                               fsync=False))
                touched.add(_day_of(timestamp_ms))
            for day in touched:
                day_file = self._files[stream][day]
                fh = day_file.handle()
                fh.flush()
                os.fsync(fh.fileno())
                day_file.write_index()
        return ids

    def _append_locked(self, stream: str, timestamp_ms: int,
                       body: Mapping[str, Any], fsync: bool) -> int:
        record_id = self._next_id[stream]
        day = _day_of(timestamp_ms)
        day_file = self._files[stream].get(day)
        if day_file is None:
            day_file = _DayFile(self.streams_dir / f"{stream}-{day}.jsonl")
            day_file.path.touch()
            self._files[stream][day] = day_file
        envelope = {"id": record_id, "ts": format_utc_ms(timestamp_ms),
                    "_ts": int(timestamp_ms), "body": dict(body)}
        line = (json.dumps(envelope, ensure_ascii=False) + "\n").encode("utf-8")
        fh = day_file.handle()
        offset = fh.tell()
        fh.write(line)
        if fsync:
            fh.flush()
            os.fsync(fh.fileno())
        # The on-disk index is an accelerator, refreshed on close()/batches;
        # recovery rebuilds it whenever its recorded size trails the file.
        day_file.index.append((int(timestamp_ms), offset, record_id))
        self._next_id[stream] = record_id + 1
        return record_id

    # -- reads -------------------------------------------------------------

    def query_range(self, stream: str, from_ms: int, to_ms: int,
                    where: Mapping[str, Any] | None = None) -> list[StreamRecord]:
        """Records with ``from_ms <= timestamp < to_ms``, ordered by
        (timestamp, record id); ``where`` filters on body fields, with dotted
        paths for nested ones."""
        self._check_stream(stream)
        if from_ms > to_ms:
            raise InvalidRangeError(f"from {from_ms} > to {to_ms}")
        with self._locks[stream]:
            day_files = []
            for day, df in sorted(self._files[stream].items()):
                df.flush()  # make unsynced appends visible to the read handle
                day_files.append((day, df, list(df.index)))
        # Clamp day pruning to datetime's representable span; the exact
        # timestamp comparison below still uses the caller's bounds.
        from_day = _day_of(min(max(from_ms, 0), _TS_SPAN))
        to_day = _day_of(min(max(to_ms, 0), _TS_SPAN))
        out: list[StreamRecord] = []
        for day, day_file, index in day_files:
            if day < from_day or day > to_day:
                continue
            wanted = [(off, rid) for ts, off, rid in index if from_ms <= ts < to_ms]
            if not wanted:
                continue
            with open(day_file.path, "rb") as fh:
                for offset, _ in wanted:
                    fh.seek(offset)
                    doc = json.loads(fh.readline())
                    record = StreamRecord(stream=stream, record_id=int(doc["id"]),
                                          timestamp=int(doc["_ts"]), body=doc["body"])
                    if where is None or _matches(record.body, where):
                        out.append(record)
        out.sort(key=lambda r: (r.timestamp, r.record_id))
        return out

    def query_all(self, stream: str,
                  where: Mapping[str, Any] | None = None) -> list[StreamRecord]:
        return self.query_range(stream, 0, _TS_SPAN, where)

    def count(self, stream: str) -> int:
        self._check_stream(stream)
        with self._locks[stream]:
            return sum(len(df.index) for df in self._files[stream].values())

    # -- maintenance -------------------------------------------------------

    def export_csv(self, stream: str, out_path: Path | str) -> int:
        """Write the whole stream as CSV with flattened body fields."""
        records = self.query_all(stream)
        flat_rows = [_flatten(r.body) for r in records]
        field_names = sorted({k for row in flat_rows for k in row})
        out_path = Path(out_path)
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["recordId", "timestamp", *field_names])
            for record, row in zip(records, flat_rows):
                writer.writerow([record.record_id, format_utc_ms(record.timestamp),
                                 *[_cell(row.get(k)) for k in field_names]])
        return len(records)

    def close(self) -> None:
        for stream in STREAMS:
            with self._locks[stream]:
                for day_file in self._files[stream].values():
                    day_file.write_index()
                    day_file.close()

    # -- helpers -----------------------------------------------------------

    def _check_stream(self, stream: str) -> None:
        if stream not in STREAMS:
            raise UnknownStreamError(f"unknown stream {stream!r}")

    def _check_body(self, stream: str, body: Mapping[str, Any]) -> None:
        if not isinstance(body, Mapping):
            raise SchemaViolationError(f"{stream}: body must be an object")
        for field, types in _SCHEMAS[stream].items():
            if field not in body:
                raise SchemaViolationError(f"{stream}: missing field {field!r}")
            if not isinstance(body[field], types) or isinstance(body[field], bool):
                raise SchemaViolationError(f"{stream}: field {field!r} has wrong type")


def _matches(body: Mapping[str, Any], where: Mapping[str, Any]) -> bool:
    for path, expected in where.items():
        node: Any = body
        for part in path.split("."):
            if isinstance(node, Mapping) and part in node:
                node = node[part]
            else:
                return False
        if node != expected:
            return False
    return True


def _flatten(body: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in body.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return json.dumps(value, ensure_ascii=False)
    return str(value)
