"""Joining survey responses with environmental readings, and the descriptive
per-participant preference profiles computed from the joined records.

A response matches the reading that shares its answered location label and
minimizes |reading time - submission time|, if that gap is inside the
configured window; ties break toward the earlier reading. Responses whose
location has no logger (including outdoor self-reports) and responses with
no reading inside the window keep their own match statuses, so every input
response lands in exactly one class.
"""
from __future__ import annotations

import csv
import io
from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .flows import SurveyDefinition
from .timeutil import format_utc_ms, parse_utc_ms

MATCHED = "matched"
NO_LOGGER = "noLoggerForLocation"
NO_READING_IN_WINDOW = "noReadingInWindow"

DEFAULT_WINDOW_SECONDS = 15 * 60
DEFAULT_LOCATION_KEY = "location-place"
DEFAULT_INDOOR_KEY = "location-inout"
DEFAULT_INDOOR_ANSWER = "Indoors"
DEFAULT_PREFERENCE_KEY = "tc-preference"


@dataclass(frozen=True)
class MergedRecord:
    response: Mapping[str, Any]
    reading: Mapping[str, Any] | None
    delta_seconds: float | None
    match_status: str


def merge_responses(responses: Sequence[Mapping[str, Any]],
                    readings: Sequence[Mapping[str, Any]],
                    window_seconds: float = DEFAULT_WINDOW_SECONDS,
                    location_key: str = DEFAULT_LOCATION_KEY,
                    indoor_key: str = DEFAULT_INDOOR_KEY,
                    indoor_answer: str = DEFAULT_INDOOR_ANSWER) -> list[MergedRecord]:
    """Match each response to its nearest same-location reading.

    ``responses`` are stored response bodies; ``readings`` are stored sensor
    bodies. Output order equals input response order. When a response carries
    an indoor/outdoor answer under ``indoor_key`` and it is not
    ``indoor_answer``, the loggers (which are indoor) cannot cover it and the
    response is classed ``noLoggerForLocation``.
    """
    if window_seconds <= 0:
        raise ValueError("window must be positive")
    window_ms = window_seconds * 1000.0

    grouped: dict[str, list[tuple[int, Mapping[str, Any]]]] = defaultdict(list)
    for reading in readings:
        grouped[reading["locationLabel"]].append(
            (parse_utc_ms(reading["timestamp"]), reading))
    by_location: dict[str, tuple[list[int], list[Mapping[str, Any]]]] = {}
    for label, entries in grouped.items():
        entries.sort(key=lambda pair: (pair[0], pair[1]["loggerId"]))
        by_location[label] = ([ts for ts, _ in entries], [r for _, r in entries])

    merged: list[MergedRecord] = []
    for response in responses:
        answers = response.get("answers", {})
        location = answers.get(location_key)
        indoor = answers.get(indoor_key)
        if location not in by_location or (indoor is not None and indoor != indoor_answer):
            merged.append(MergedRecord(response, None, None, NO_LOGGER))
            continue
        submitted = parse_utc_ms(response["submittedAt"])
        times, entries = by_location[location]
        i = _nearest_index(times, submitted)
        delta_ms = times[i] - submitted
        if abs(delta_ms) > window_ms:
            merged.append(MergedRecord(response, None, None, NO_READING_IN_WINDOW))
            continue
        merged.append(MergedRecord(response, entries[i], delta_ms / 1000.0, MATCHED))
    return merged


def _nearest_index(times: list[int], target: int) -> int:
    """Index minimizing |times[i] - target|; equal distances pick the earlier
    timestamp, and within one timestamp the smallest loggerId (the run start
    of the (timestamp, loggerId) sort) wins.
    """
    pos = bisect_left(times, target)
    n = len(times)
    if pos == 0:
        return 0
    if pos == n:
        return bisect_left(times, times[n - 1])
    before, after = times[pos - 1], times[pos]
    # bisect_left puts pos at the first entry >= target, so 'before' is
    # strictly smaller; the earlier entry wins exact distance ties.
    if target - before <= after - target:
        return bisect_left(times, before)
    return pos


# ---------------------------------------------------------------------------
# Preference profiles


@dataclass
class PreferenceProfile:
    participant_id: str
    bin_width_c: float
    total_responses: int = 0
    matched_responses: int = 0
    overall_counts: dict[str, int] = field(default_factory=dict)
    bin_counts: dict[float, dict[str, int]] = field(default_factory=dict)

    def bin_fractions(self) -> dict[float, dict[str, float]]:
        out: dict[float, dict[str, float]] = {}
        for bin_start, counts in self.bin_counts.items():
            total = sum(counts.values())
            out[bin_start] = {option: count / total for option, count in counts.items()}
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "participantId": self.participant_id,
            "binWidthC": self.bin_width_c,
            "totalResponses": self.total_responses,
            "matchedResponses": self.matched_responses,
            "overallCounts": dict(self.overall_counts),
            "binCounts": {f"{k:g}": dict(v) for k, v in sorted(self.bin_counts.items())},
            "binFractions": {f"{k:g}": v for k, v in sorted(self.bin_fractions().items())},
        }


def preference_profiles(merged: Iterable[MergedRecord], bin_width_c: float = 2.0,
                        preference_key: str = DEFAULT_PREFERENCE_KEY,
                        ) -> dict[str, PreferenceProfile]:
    """Per-participant tallies of thermal-preference votes, overall and per
    dry-bulb temperature bin (matched records only fill the bins)."""
    if bin_width_c <= 0:
        raise ValueError("bin width must be positive")
    profiles: dict[str, PreferenceProfile] = {}
    for record in merged:
        participant = record.response["participantId"]
        vote = record.response.get("answers", {}).get(preference_key)
        if vote is None:
            continue
        profile = profiles.get(participant)
        if profile is None:
            profile = profiles[participant] = PreferenceProfile(participant, bin_width_c)
        profile.total_responses += 1
        profile.overall_counts[vote] = profile.overall_counts.get(vote, 0) + 1
        if record.match_status == MATCHED and record.reading is not None:
            profile.matched_responses += 1
            temp = float(record.reading["dryBulbTempC"])
            bin_start = (temp // bin_width_c) * bin_width_c
            counts = profile.bin_counts.setdefault(bin_start, {})
            counts[vote] = counts.get(vote, 0) + 1
    return profiles


# ---------------------------------------------------------------------------
# Analysis-ready export


def merged_csv_bytes(merged: Sequence[MergedRecord],
                     definition: SurveyDefinition) -> bytes:
    """Deterministic CSV of merged records.

    Column order is fixed: participantId, submittedAt, one column per
    question identifier in definition order, the physiological snapshot
    fields, the matched reading fields, deltaSeconds, matchStatus. Unmatched
    sensor columns stay empty.
    """
    identifiers = [q.identifier for q in definition.questions]
    header = ["participantId", "submittedAt", *identifiers,
              "heartRate", "stepCount", "latitude", "longitude",
              "dryBulbTempC", "relativeHumidityPct", "deltaSeconds", "matchStatus"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for record in merged:
        response = record.response
        answers = response.get("answers", {})
        physio = response.get("physiological") or {}
        row = [response["participantId"], response["submittedAt"]]
        row += [answers.get(ident, "") for ident in identifiers]
        row += [_num(physio.get("heartRate")), _num(physio.get("stepCount")),
                _num(physio.get("latitude")), _num(physio.get("longitude"))]
        if record.reading is not None:
            row += [_num(record.reading["dryBulbTempC"]),
                    _num(record.reading["relativeHumidityPct"]),
                    _num(record.delta_seconds)]
        else:
            row += ["", "", ""]
        row.append(record.match_status)
        writer.writerow(row)
    return buf.getvalue().encode("utf-8")


def merged_to_dict(record: MergedRecord) -> dict[str, Any]:
    return {
        "response": dict(record.response),
        "reading": dict(record.reading) if record.reading is not None else None,
        "deltaSeconds": record.delta_seconds,
        "matchStatus": record.match_status,
    }


def _num(value: Any) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)
