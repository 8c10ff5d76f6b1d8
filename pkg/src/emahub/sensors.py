"""Environmental data-logger CSV import.

Normative file schema: header ``loggerId,locationLabel,timestamp,dryBulbTempC,
relativeHumidityPct``; timestamps must already be UTC. Each data line becomes
either one reading or one reject, so parsed + rejected always equals the
number of data lines. Imports dedup on (loggerId, timestamp), which makes
re-importing the same file a no-op.
"""
from __future__ import annotations

import csv
import gzip
import io
from dataclasses import dataclass

from .store import StreamStore
from .timeutil import format_utc_ms, is_utc_literal, parse_utc_ms

EXPECTED_HEADER = ["loggerId", "locationLabel", "timestamp",
                   "dryBulbTempC", "relativeHumidityPct"]

TEMP_RANGE_C = (-40.0, 60.0)
HUMIDITY_RANGE_PCT = (0.0, 100.0)


class MalformedHeaderError(Exception):
    pass


@dataclass(frozen=True)
class SensorReading:
    logger_id: str
    location_label: str
    timestamp: int  # epoch ms
    dry_bulb_temp_c: float
    relative_humidity_pct: float

    def to_body(self) -> dict:
        return {
            "loggerId": self.logger_id,
            "locationLabel": self.location_label,
            "timestamp": format_utc_ms(self.timestamp),
            "dryBulbTempC": self.dry_bulb_temp_c,
            "relativeHumidityPct": self.relative_humidity_pct,
        }


@dataclass(frozen=True)
class Reject:
    line_no: int  # 1-based, counting the header as line 1
    reason: str
    detail: str = ""


def parse_csv(data: bytes) -> tuple[list[SensorReading], list[Reject]]:
    """Parse a plain or gzip-compressed logger export."""
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError(f"file is not UTF-8 text: {exc}") from exc

    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise MalformedHeaderError("file is empty") from None
    if [h.strip() for h in header] != EXPECTED_HEADER:
        raise MalformedHeaderError(
            f"expected header {','.join(EXPECTED_HEADER)}, got {','.join(header)}")

    readings: list[SensorReading] = []
    rejects: list[Reject] = []
    for line_no, row in enumerate(rows, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue  # blank line, not a data line
        result = _parse_row(row)
        if isinstance(result, SensorReading):
            readings.append(result)
        else:
            reason, detail = result
            rejects.append(Reject(line_no, reason, detail))
    return readings, rejects


def _parse_row(row: list[str]):
    if len(row) != len(EXPECTED_HEADER):
        return "fieldCount", f"expected {len(EXPECTED_HEADER)} fields, got {len(row)}"
    logger_id, location, ts_text, temp_text, rh_text = (cell.strip() for cell in row)
    if not logger_id:
        return "emptyLoggerId", ""
    if not location:
        return "emptyLocation", ""
    try:
        ts = parse_utc_ms(ts_text)
    except ValueError:
        return "badTimestamp", ts_text
    if not is_utc_literal(ts_text):
        return "nonUtcTimestamp", ts_text
    try:
        temp = float(temp_text)
    except ValueError:
        return "badTemperature", temp_text
    if not TEMP_RANGE_C[0] <= temp <= TEMP_RANGE_C[1]:
        return "temperatureOutOfRange", temp_text
    try:
        humidity = float(rh_text)
    except ValueError:
        return "badHumidity", rh_text
    if not HUMIDITY_RANGE_PCT[0] <= humidity <= HUMIDITY_RANGE_PCT[1]:
        return "humidityOutOfRange", rh_text
    return SensorReading(logger_id, location, ts, temp, humidity)


def import_readings(store: StreamStore, readings: list[SensorReading]) -> int:
    """Append fresh readings to the sensor stream; returns how many were new."""
    existing = {
        (record.body["loggerId"], record.body["timestamp"])
        for record in store.query_all("sensor")
    }
    fresh: list[SensorReading] = []
    seen = set(existing)
    for reading in readings:
        key = (reading.logger_id, format_utc_ms(reading.timestamp))
        if key in seen:
            continue
        seen.add(key)
        fresh.append(reading)
    if fresh:
        store.append_batch("sensor", [(r.timestamp, r.to_body()) for r in fresh])
    return len(fresh)


def import_file(store: StreamStore, data: bytes) -> tuple[int, list[Reject]]:
    """Parse then import; returns (appended count, rejects)."""
    readings, rejects = parse_csv(data)
    return import_readings(store, readings), rejects
