"""Append-only run transcript: every message, decision, and capture.

Events carry a strictly increasing seq and an ISO-8601 timestamp; the
timestamp is the only nondeterministic field, so determinism checks
compare transcripts through strip_timestamps.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any

EVENT_KINDS = (
    "message_out",
    "message_in",
    "discovery",
    "policy_verdict",
    "consent_decision",
    "sink_capture",
    "plan_outcome",
)


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    at: str
    kind: str
    payload: Any

    def to_json(self) -> dict:
        return {"seq": self.seq, "at": self.at, "kind": self.kind, "payload": self.payload}


class Transcript:
    """Ordered audit log; append is thread-safe."""

    def __init__(self):
        self._lock = threading.Lock()
        self._events: list[AuditEvent] = []

    def append(self, kind: str, payload: Any) -> AuditEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        with self._lock:
            event = AuditEvent(
                seq=len(self._events) + 1,
                at=datetime.now(timezone.utc).isoformat(),
                kind=kind,
                payload=payload,
            )
            self._events.append(event)
        return event

    def events(self) -> list[AuditEvent]:
        with self._lock:
            return list(self._events)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(e.to_json(), ensure_ascii=False, separators=(",", ":")) + "\n"
            for e in self.events()
        )

    def write_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())


def strip_timestamps(events: list[dict]) -> list[dict]:
    """Events as JSON with every wall-clock field removed.

    Drops each event's ``at`` and, for sink captures, the payload's
    ``received_at``, leaving only deterministic content.
    """
    stripped = []
    for event in events:
        event = dict(event)
        event.pop("at", None)
        payload = event.get("payload")
        if isinstance(payload, dict) and "received_at" in payload:
            payload = dict(payload)
            payload.pop("received_at")
            event["payload"] = payload
        stripped.append(event)
    return stripped
