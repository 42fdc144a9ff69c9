"""Append-only JSON-lines record store keyed by content hash."""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path


def content_hash(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class RecordCache:
    """Maps ``key`` to the last record appended under it.

    Reads come from an in-memory dict loaded once; appends go to the file under
    a lock so concurrent writers never interleave lines. ``path=None`` keeps
    everything in memory.
    """

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._records: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        rec = json.loads(line)
                        self._records[rec["key"]] = rec

    def get(self, key: str) -> dict | None:
        return self._records.get(key)

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def __len__(self) -> int:
        return len(self._records)

    def values(self) -> list[dict]:
        return list(self._records.values())

    def append(self, record: dict) -> None:
        with self._lock:
            if record["key"] in self._records:
                return
            self._records[record["key"]] = record
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as f:
                    f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
