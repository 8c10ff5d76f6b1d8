"""Append-only store: ids, ordering, filters, durability, immutability."""
from __future__ import annotations

import hashlib
import json
import threading

import pytest

from emahub.store import (
    InvalidRangeError,
    SchemaViolationError,
    StreamStore,
    UnknownStreamError,
)

DAY_MS = 86_400_000
T0 = 1_614_556_800_000  # 2021-03-01T00:00:00Z


def sensor_body(logger="L1", label="Office", ts="2021-03-01T08:00:00.000Z",
                temp=23.5, rh=55.0):
    return {"loggerId": logger, "locationLabel": label, "timestamp": ts,
            "dryBulbTempC": temp, "relativeHumidityPct": rh}


def dispatch_body(rule="r", pid="p", status="ok"):
    return {"ruleId": rule, "participantId": pid, "providerStatus": status}


class TestAppend:
    def test_first_record_gets_id_one(self, tmp_path):
        store = StreamStore(tmp_path)
        assert store.append("sensor", T0, sensor_body()) == 1

    def test_ids_follow_arrival_order_not_timestamps(self, tmp_path):
        store = StreamStore(tmp_path)
        late = store.append("sensor", T0 + 5000, sensor_body())
        early = store.append("sensor", T0, sensor_body(logger="L2"))
        assert (late, early) == (1, 2)

    def test_unknown_stream(self, tmp_path):
        with pytest.raises(UnknownStreamError):
            StreamStore(tmp_path).append("bogus", T0, {})

    def test_schema_guard(self, tmp_path):
        store = StreamStore(tmp_path)
        with pytest.raises(SchemaViolationError):
            store.append("sensor", T0, {"loggerId": "L1"})
        with pytest.raises(SchemaViolationError):
            store.append("dispatches", T0, dispatch_body(rule=7))

    def test_concurrent_appends_get_distinct_contiguous_ids(self, tmp_path):
        store = StreamStore(tmp_path)
        per_writer, writers = 1250, 8
        ids: list[list[int]] = [[] for _ in range(writers)]

        def work(slot: int) -> None:
            for i in range(per_writer):
                ids[slot].append(store.append(
                    "dispatches", T0 + i, dispatch_body(pid=f"w{slot}"),
                    fsync=False))

        threads = [threading.Thread(target=work, args=(w,)) for w in range(writers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        flat = sorted(x for chunk in ids for x in chunk)
        assert flat == list(range(1, per_writer * writers + 1))

    def test_ids_continue_across_reopen(self, tmp_path):
        store = StreamStore(tmp_path)
        store.append("sensor", T0, sensor_body())
        store.close()
        reopened = StreamStore(tmp_path)
        assert reopened.append("sensor", T0 + 1000, sensor_body(logger="L9")) == 2


class TestQuery:
    def test_full_range_returns_everything(self, tmp_path):
        store = StreamStore(tmp_path)
        for i in range(20):
            store.append("sensor", T0 + i * 60_000, sensor_body(logger=f"L{i}"),
                         fsync=False)
        assert len(store.query_all("sensor")) == 20

    def test_empty_range(self, tmp_path):
        store = StreamStore(tmp_path)
        store.append("sensor", T0, sensor_body())
        assert store.query_range("sensor", T0, T0) == []

    def test_bounds_are_half_open(self, tmp_path):
        store = StreamStore(tmp_path)
        store.append("sensor", T0, sensor_body())
        store.append("sensor", T0 + 1000, sensor_body(logger="L2"))
        hits = store.query_range("sensor", T0, T0 + 1000)
        assert [r.body["loggerId"] for r in hits] == ["L1"]

    def test_invalid_range(self, tmp_path):
        with pytest.raises(InvalidRangeError):
            StreamStore(tmp_path).query_range("sensor", 10, 5)

    def test_order_is_timestamp_then_id(self, tmp_path):
        store = StreamStore(tmp_path)
        store.append("sensor", T0 + 9000, sensor_body(logger="A"), fsync=False)
        store.append("sensor", T0 + 1000, sensor_body(logger="B"), fsync=False)
        store.append("sensor", T0 + 9000, sensor_body(logger="C"), fsync=False)
        got = [(r.body["loggerId"], r.record_id) for r in store.query_all("sensor")]
        assert got == [("B", 2), ("A", 1), ("C", 3)]

    def test_filter_matches_full_scan_oracle(self, tmp_path):
        import random
        rng = random.Random(7)
        store = StreamStore(tmp_path)
        rows = []
        for i in range(5000):
            pid = f"p{rng.randrange(8)}"
            ts = T0 + rng.randrange(0, 3 * DAY_MS)
            body = {"participantId": pid, "surveyId": "s", "surveyVersion": 1,
                    "startedAt": "2021-03-01T00:00:00.000Z",
                    "submittedAt": "2021-03-01T00:00:01.000Z",
                    "answers": {"tc-preference": "Cooler"},
                    "slot": i}
            rows.append((ts, body))
        store.append_batch("responses", rows)
        target = "p3"
        got = store.query_all("responses", {"participantId": target})
        oracle = [r for r in store.query_all("responses")
                  if r.body["participantId"] == target]
        assert [r.record_id for r in got] == [r.record_id for r in oracle]
        assert all(r.body["participantId"] == target for r in got)

    def test_nested_filter_path(self, tmp_path):
        store = StreamStore(tmp_path)
        body = sensor_body()
        store.append("sensor", T0, body)
        assert store.query_all("sensor", {"locationLabel": "Office"})
        assert not store.query_all("sensor", {"locationLabel": "Home"})

    def test_records_span_multiple_day_files(self, tmp_path):
        store = StreamStore(tmp_path)
        for d in range(3):
            store.append("sensor", T0 + d * DAY_MS, sensor_body(logger=f"L{d}"),
                         fsync=False)
        files = sorted(p.name for p in (tmp_path / "streams").glob("sensor-*.jsonl"))
        assert files == ["sensor-20210301.jsonl", "sensor-20210302.jsonl",
                         "sensor-20210303.jsonl"]
        assert len(store.query_all("sensor")) == 3
        mid = store.query_range("sensor", T0 + DAY_MS, T0 + 2 * DAY_MS)
        assert [r.body["loggerId"] for r in mid] == ["L1"]


class TestDurability:
    def test_partial_tail_is_dropped_on_reopen(self, tmp_path):
        store = StreamStore(tmp_path)
        store.append("sensor", T0, sensor_body())
        store.append("sensor", T0 + 1000, sensor_body(logger="L2"))
        store.close()
        path = tmp_path / "streams" / "sensor-20210301.jsonl"
        with open(path, "ab") as fh:
            fh.write(b'{"id": 3, "ts": "2021-03-01T00:00:02.000Z", "_ts"')
        reopened = StreamStore(tmp_path)
        assert [r.record_id for r in reopened.query_all("sensor")] == [1, 2]
        assert reopened.append("sensor", T0 + 2000, sensor_body(logger="L3")) == 3

    def test_stale_index_is_rebuilt(self, tmp_path):
        store = StreamStore(tmp_path)
        store.append("sensor", T0, sensor_body())
        store.close()
        # another writer appends without refreshing the sidecar
        path = tmp_path / "streams" / "sensor-20210301.jsonl"
        line = json.dumps({"id": 2, "ts": "x", "_ts": T0 + 500,
                           "body": sensor_body(logger="L2")}) + "\n"
        with open(path, "ab") as fh:
            fh.write(line.encode())
        reopened = StreamStore(tmp_path)
        assert len(reopened.query_all("sensor")) == 2

    def test_records_survive_reopen_byte_identical(self, tmp_path):
        store = StreamStore(tmp_path)
        body = sensor_body(temp=21.125, rh=33.875)
        store.append("sensor", T0, body)
        store.close()
        got = StreamStore(tmp_path).query_all("sensor")[0]
        assert got.body == body

    def test_reads_do_not_change_files(self, tmp_path):
        store = StreamStore(tmp_path)
        for i in range(50):
            store.append("sensor", T0 + i, sensor_body(logger=f"L{i}"), fsync=False)
        store.close()
        path = tmp_path / "streams" / "sensor-20210301.jsonl"
        before = hashlib.sha256(path.read_bytes()).hexdigest()
        reopened = StreamStore(tmp_path)
        reopened.query_all("sensor")
        reopened.query_range("sensor", T0, T0 + 10)
        reopened.export_csv("sensor", tmp_path / "out.csv")
        assert hashlib.sha256(path.read_bytes()).hexdigest() == before


class TestExport:
    def test_csv_flattens_nested_body(self, tmp_path):
        store = StreamStore(tmp_path)
        store.append("responses", T0, {
            "participantId": "p1", "surveyId": "s", "surveyVersion": 1,
            "startedAt": "2021-03-01T00:00:00.000Z",
            "submittedAt": "2021-03-01T00:00:01.000Z",
            "answers": {"tc-preference": "Cooler"},
            "physiological": {"heartRate": 72.5},
        })
        out = tmp_path / "responses.csv"
        assert store.export_csv("responses", out) == 1
        header, row = out.read_text().strip().splitlines()
        assert "answers.tc-preference" in header.split(",")
        assert "physiological.heartRate" in header.split(",")
        assert "72.5" in row.split(",")
