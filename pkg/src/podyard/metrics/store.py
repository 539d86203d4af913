"""Append-only time-series store with ndjson persistence.

A series is identified by its metric name plus the sorted label set.
Within a series timestamps must be strictly increasing; stale appends are
rejected. Each series keeps a bounded in-memory window; the full history
is appended to one ndjson file per UTC day and replayed on reopen.
"""
from __future__ import annotations

import json
import logging
import threading
from collections import deque
from datetime import datetime, timezone
from pathlib import Path

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 10_000

SeriesKey = tuple  # (name, ((label, value), ...))


def series_key(name: str, labels: dict[str, str]) -> SeriesKey:
    return (name, tuple(sorted(labels.items())))


class StaleSampleError(ValueError):
    """Appended timestamp does not advance the series."""


class MetricStore:
    def __init__(self, directory: str | Path | None = None, window: int = DEFAULT_WINDOW):
        self._dir = Path(directory) if directory is not None else None
        self._window = window
        self._lock = threading.Lock()
        self._series: dict[SeriesKey, deque] = {}
        self._labels: dict[SeriesKey, dict[str, str]] = {}
        self._open_day: str | None = None
        self._open_file = None
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._replay()

    def close(self):
        with self._lock:
            if self._open_file is not None:
                self._open_file.close()
                self._open_file = None
                self._open_day = None

    def append(self, name: str, labels: dict[str, str], ts: float, value: float) -> None:
        key = series_key(name, labels)
        with self._lock:
            self._append_locked(key, labels, ts, value, persist=True, strict=True)

    def _append_locked(self, key, labels, ts, value, persist: bool, strict: bool) -> bool:
        points = self._series.get(key)
        if points is None:
            points = deque(maxlen=self._window)
            self._series[key] = points
            self._labels[key] = dict(labels)
        if points and ts <= points[-1][0]:
            if strict:
                raise StaleSampleError(
                    f"timestamp {ts} does not advance series {key[0]}{dict(key[1])} (last {points[-1][0]})"
                )
            return False
        points.append((ts, value))
        if persist and self._dir is not None:
            self._write_line(key[0], labels, ts, value)
        return True

    def _write_line(self, name, labels, ts, value):
        day = datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%d")
        if day != self._open_day:
            if self._open_file is not None:
                self._open_file.close()
            self._open_file = open(self._dir / f"metrics-{day}.ndjson", "a", encoding="utf-8")
            self._open_day = day
        record = {"name": name, "labels": labels, "ts": ts, "value": value}
        self._open_file.write(json.dumps(record, sort_keys=True) + "\n")
        self._open_file.flush()

    def _replay(self):
        skipped = 0
        for path in sorted(self._dir.glob("metrics-*.ndjson")):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    key = series_key(record["name"], record["labels"])
                    ok = self._append_locked(
                        key, record["labels"], record["ts"], record["value"], persist=False, strict=False
                    )
                    if not ok:
                        skipped += 1
        if skipped:
            log.warning("replay skipped %d non-advancing samples", skipped)

    def series(self) -> list[SeriesKey]:
        with self._lock:
            return sorted(self._series)

    def labels_of(self, key: SeriesKey) -> dict[str, str]:
        with self._lock:
            return dict(self._labels[key])

    def latest(self, name: str, label_filter: dict[str, str] | None = None) -> dict[SeriesKey, tuple]:
        """Newest (ts, value) for every series of ``name`` matching the filter."""
        label_filter = label_filter or {}
        out = {}
        with self._lock:
            for key, points in self._series.items():
                if key[0] != name or not points:
                    continue
                labels = dict(key[1])
                if all(labels.get(k) == v for k, v in label_filter.items()):
                    out[key] = points[-1]
        return out

    def query_range(
        self, name: str, label_filter: dict[str, str] | None, start: float, end: float
    ) -> dict[SeriesKey, list[tuple]]:
        """Points with start <= ts < end, per matching series, oldest first."""
        label_filter = label_filter or {}
        out = {}
        with self._lock:
            for key, points in self._series.items():
                if key[0] != name:
                    continue
                labels = dict(key[1])
                if not all(labels.get(k) == v for k, v in label_filter.items()):
                    continue
                window = [(ts, v) for ts, v in points if start <= ts < end]
                if window:
                    out[key] = window
        return out
