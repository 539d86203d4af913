"""Append-only newline-delimited JSON record log with replay.

Both the control plane and the workflow launcher persist their state as a
sequence of mutation records; reloading is a full replay. A torn or
corrupt line (e.g. from a crash mid-write) is skipped and counted rather
than poisoning the reload.
"""
from __future__ import annotations

import json
import logging
import threading
from pathlib import Path

log = logging.getLogger(__name__)


class Journal:
    def __init__(self, path):
        self.path = Path(path)
        self.skipped_on_replay = 0
        self._lock = threading.Lock()
        self._fh = None

    def replay(self) -> list[dict]:
        """All decodable records, in write order. Safe before/after appends."""
        records = []
        self.skipped_on_replay = 0
        if not self.path.exists():
            return records
        with self.path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    self.skipped_on_replay += 1
                    log.warning("journal %s: skipping corrupt line %d", self.path, lineno)
                    continue
                if isinstance(record, dict):
                    records.append(record)
                else:
                    self.skipped_on_replay += 1
                    log.warning("journal %s: line %d is not a record", self.path, lineno)
        return records

    def append(self, record: dict) -> None:
        line = json.dumps(record, separators=(",", ":"), sort_keys=True)
        with self._lock:
            if self._fh is None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._fh = self.path.open("a", encoding="utf-8")
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
