"""Append-only run ledger: one line per completed (stage, record) pair.

The ledger is the only artifact that carries timestamps; everything else a
run writes is a deterministic function of its inputs. A header line pins the
config digest and input digests so a resume can refuse to continue a run
whose configuration drifted.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path


class LedgerError(Exception):
    """Raised when the ledger is unreadable or inconsistent with the run."""


@dataclass(frozen=True)
class LedgerHeader:
    config_digest: str
    input_digests: dict[str, str]


class RunLedger:
    """Journal of stage completions keyed by (stage, record id)."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()
        self._completed: set[tuple[str, str]] = set()
        self._header: LedgerHeader | None = None
        if path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                if row.get("kind") == "header":
                    self._header = LedgerHeader(
                        config_digest=row["config_digest"],
                        input_digests=row.get("input_digests", {}),
                    )
                else:
                    self._completed.add((row["stage"], row["record_id"]))

    @property
    def header(self) -> LedgerHeader | None:
        return self._header

    def write_header(self, config_digest: str, input_digests: dict[str, str]) -> None:
        if self._header is not None:
            if self._header.config_digest != config_digest:
                raise LedgerError(
                    "config drift: this run directory was started with a different "
                    f"configuration (ledger digest {self._header.config_digest[:12]}, "
                    f"current {config_digest[:12]}); refusing to resume")
            return
        self._header = LedgerHeader(config_digest, input_digests)
        self._append({
            "kind": "header",
            "config_digest": config_digest,
            "input_digests": input_digests,
            "started_at": datetime.now(timezone.utc).isoformat(),
        })

    def is_done(self, stage: str, record_id: str) -> bool:
        return (stage, record_id) in self._completed

    def mark_done(self, stage: str, record_id: str) -> None:
        with self._lock:
            if (stage, record_id) in self._completed:
                return
            self._completed.add((stage, record_id))
            self._append_locked({
                "stage": stage,
                "record_id": record_id,
                "ts": datetime.now(timezone.utc).isoformat(),
            })

    def completed_for_stage(self, stage: str) -> set[str]:
        return {record_id for s, record_id in self._completed if s == stage}

    def _append(self, row: dict) -> None:
        with self._lock:
            self._append_locked(row)

    def _append_locked(self, row: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
