"""Per-call telemetry: records, the wire format, delivery, and ingestion.

Delivery is at-least-once; every record carries an idempotency key
(emitter, stage, sequence number) and the collector deduplicates on it.
A proxy never fails a client request because its sink is down: the loss is
counted locally and reported on the next successful delivery.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Protocol

from .errors import SinkUnavailable


@dataclass(frozen=True)
class CallRecord:
    """One proxied invocation as reported by the proxy function."""

    ts: float
    stage: str
    variant: str
    duration_ms: float
    error: bool
    client_id: str | None = None
    mirror: bool = False
    emitter: str = ""
    seq: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "stage": self.stage,
            "variant": self.variant,
            "duration_ms": self.duration_ms,
            "error": self.error,
            "client_id": self.client_id,
            "mirror": self.mirror,
            "emitter": self.emitter,
            "seq": self.seq,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CallRecord":
        return cls(
            ts=data["ts"],
            stage=data["stage"],
            variant=data["variant"],
            duration_ms=data["duration_ms"],
            error=data["error"],
            client_id=data.get("client_id"),
            mirror=data.get("mirror", False),
            emitter=data.get("emitter", ""),
            seq=data.get("seq", 0),
        )


def encode_records(records: list[CallRecord], losses: int = 0) -> str:
    """Newline-delimited JSON, one object per record.

    A reported loss count rides along as a control line so previously
    unreportable records are accounted for once connectivity returns.
    """
    lines = []
    if losses:
        lines.append(json.dumps({"control": "losses", "count": losses}))
    lines.extend(json.dumps(r.to_dict(), separators=(",", ":")) for r in records)
    return "\n".join(lines) + "\n"


def decode_records(payload: str) -> tuple[list[CallRecord], int]:
    records: list[CallRecord] = []
    losses = 0
    for line in payload.splitlines():
        line = line.strip()
        if not line:
            continue
        data = json.loads(line)
        if data.get("control") == "losses":
            losses += int(data.get("count", 0))
            continue
        records.append(CallRecord.from_dict(data))
    return records, losses


class TelemetrySink(Protocol):
    def submit(self, records: list[CallRecord], losses: int = 0) -> None:
        """Deliver records toward the owning agent; raises SinkUnavailable."""


class RecordCollector:
    """Agent-side ingestion buffer: thread-safe, deduplicating, counting."""

    def __init__(self, on_record: Callable[[CallRecord], None] | None = None) -> None:
        self._lock = threading.Lock()
        self._seen: set[tuple[str, str, int]] = set()
        self._on_record = on_record
        self.accepted = 0
        self.duplicates = 0
        self.reported_losses = 0

    def ingest(self, records: list[CallRecord], losses: int = 0) -> int:
        """Returns the number of newly accepted (non-duplicate) records."""
        fresh: list[CallRecord] = []
        with self._lock:
            self.reported_losses += losses
            for record in records:
                key = (record.emitter, record.stage, record.seq)
                if record.emitter and key in self._seen:
                    self.duplicates += 1
                    continue
                if record.emitter:
                    self._seen.add(key)
                self.accepted += 1
                fresh.append(record)
        if self._on_record is not None:
            for record in fresh:
                self._on_record(record)
        return len(fresh)


class InProcessSink:
    """Direct handoff to a collector in the same process."""

    def __init__(self, collector: RecordCollector) -> None:
        self._collector = collector
        self.down = False

    def submit(self, records: list[CallRecord], losses: int = 0) -> None:
        if self.down:
            raise SinkUnavailable("collector marked down")
        self._collector.ingest(records, losses)


def record_call(record: CallRecord, sink: TelemetrySink) -> None:
    """Enqueue one record toward the owning agent.

    Raises SinkUnavailable when the agent cannot be reached; the caller is
    expected to keep serving and count the loss.
    """
    if record.duration_ms < 0:
        raise ValueError("duration_ms must be non-negative")
    sink.submit([record])


class TelemetryEmitter:
    """Proxy-side delivery with sequence numbering and loss accounting."""

    def __init__(self, sink: TelemetrySink, emitter_id: str, clock: Callable[[], float] = time.time) -> None:
        self._sink = sink
        self._id = emitter_id
        self._clock = clock
        self._lock = threading.Lock()
        self._seq: dict[str, int] = {}
        self.lost = 0

    def emit(
        self,
        stage: str,
        variant: str,
        duration_ms: float,
        error: bool,
        client_id: str | None = None,
        mirror: bool = False,
    ) -> bool:
        """Report one call; returns False when the sink was unreachable."""
        with self._lock:
            seq = self._seq.get(stage, 0)
            self._seq[stage] = seq + 1
            pending_losses = self.lost
        record = CallRecord(
            ts=self._clock(),
            stage=stage,
            variant=variant,
            duration_ms=duration_ms,
            error=error,
            client_id=client_id,
            mirror=mirror,
            emitter=self._id,
            seq=seq,
        )
        try:
            self._sink.submit([record], losses=pending_losses)
        except SinkUnavailable:
            with self._lock:
                self.lost += 1
            return False
        if pending_losses:
            with self._lock:
                self.lost -= pending_losses
        return True
