"""Append-only event log for one refinement session.

Events are kept in memory and, when a path is given, mirrored to a JSONL
file as ``{"seq": n, "kind": ..., "payload": ...}`` lines in causal order.
"""

from __future__ import annotations

import json
from pathlib import Path

EVENT_KINDS = ("prompt", "response", "render", "metrics", "decision", "termination")


class Transcript:
    def __init__(self, path: str | Path | None = None) -> None:
        self.events: list[dict] = []
        self._seq = 0
        self._path = Path(path) if path is not None else None
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._path.write_text("", encoding="utf-8")

    @property
    def path(self) -> Path | None:
        return self._path

    def record(self, kind: str, payload: dict) -> dict:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind '{kind}'")
        self._seq += 1
        event = {"seq": self._seq, "kind": kind, "payload": payload}
        self.events.append(event)
        if self._path is not None:
            with self._path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, ensure_ascii=False) + "\n")
        return event

    def kinds(self) -> list[str]:
        return [event["kind"] for event in self.events]

    def of_kind(self, kind: str) -> list[dict]:
        return [event for event in self.events if event["kind"] == kind]
