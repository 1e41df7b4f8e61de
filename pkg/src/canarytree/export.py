"""Run exports: per-call rows plus stage boundary markers, written as
delimited files and JSON with a deterministic column order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import UnknownRelease
from .metrics import StageResult

ROW_COLUMNS = ["ts_ms", "node", "variant", "duration_ms", "error", "proxied", "stage"]
MARKER_COLUMNS = ["ts_ms", "node", "release", "stage", "kind", "status"]


@dataclass(frozen=True)
class ExportRow:
    ts_ms: float
    node: str
    variant: str
    duration_ms: float
    error: bool
    proxied: bool
    stage: str
    # In-memory only; the delimited schema stays fixed to ROW_COLUMNS.
    client_id: str = ""


@dataclass(frozen=True)
class StageMarker:
    ts_ms: float
    node: str
    release: str
    stage: str
    kind: str  # start | end
    status: str = ""


@dataclass
class RunExport:
    rows: list[ExportRow] = field(default_factory=list)
    markers: list[StageMarker] = field(default_factory=list)
    results: list[StageResult] = field(default_factory=list)

    def stage_window(self, node: str, stage: str) -> tuple[float, float] | None:
        start = end = None
        for marker in self.markers:
            if marker.node != node or marker.stage != stage:
                continue
            if marker.kind == "start":
                start = marker.ts_ms if start is None else min(start, marker.ts_ms)
            elif marker.kind == "end":
                end = marker.ts_ms if end is None else max(end, marker.ts_ms)
        if start is None:
            return None
        return start, end if end is not None else float("inf")

    def rows_in_stage(self, node: str, stage: str) -> list[ExportRow]:
        window = self.stage_window(node, stage)
        if window is None:
            return []
        lo, hi = window
        return [
            r for r in self.rows
            if r.node == node and r.stage == stage and lo <= r.ts_ms <= hi
        ]

    def stage_names(self, node: str | None = None) -> list[str]:
        seen: list[str] = []
        for marker in self.markers:
            if marker.kind != "start":
                continue
            if node is not None and marker.node != node:
                continue
            if marker.stage not in seen:
                seen.append(marker.stage)
        return seen


def write_rows_csv(rows: Iterable[ExportRow], path: Path | str) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROW_COLUMNS)
        for r in rows:
            writer.writerow(
                [f"{r.ts_ms:.3f}", r.node, r.variant, f"{r.duration_ms:.3f}",
                 int(r.error), int(r.proxied), r.stage]
            )
    return path


def read_rows_csv(path: Path | str) -> list[ExportRow]:
    rows: list[ExportRow] = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            rows.append(
                ExportRow(
                    ts_ms=float(record["ts_ms"]),
                    node=record["node"],
                    variant=record["variant"],
                    duration_ms=float(record["duration_ms"]),
                    error=record["error"] == "1",
                    proxied=record["proxied"] == "1",
                    stage=record["stage"],
                )
            )
    return rows


def write_markers_csv(markers: Iterable[StageMarker], path: Path | str) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MARKER_COLUMNS)
        for m in markers:
            writer.writerow([f"{m.ts_ms:.3f}", m.node, m.release, m.stage, m.kind, m.status])
    return path


def read_markers_csv(path: Path | str) -> list[StageMarker]:
    markers: list[StageMarker] = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            markers.append(
                StageMarker(
                    ts_ms=float(record["ts_ms"]),
                    node=record["node"],
                    release=record["release"],
                    stage=record["stage"],
                    kind=record["kind"],
                    status=record.get("status", ""),
                )
            )
    return markers


def read_agent_log(path: Path | str, release_id: str | None = None) -> tuple[list[StageMarker], list[StageResult]]:
    """Parse an agent's newline-delimited results log."""
    markers: list[StageMarker] = []
    results: list[StageResult] = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            if release_id is not None and data.get("release") != release_id:
                continue
            if data.get("type") == "marker":
                markers.append(
                    StageMarker(
                        ts_ms=data["ts_ms"],
                        node=data["node"],
                        release=data.get("release", ""),
                        stage=data["stage"],
                        kind=data["kind"],
                        status=data.get("status", ""),
                    )
                )
            elif data.get("type") == "result":
                results.append(StageResult.from_dict(data))
    return markers, results


def build_export(
    rows: Sequence[ExportRow],
    log_paths: Sequence[Path | str] = (),
    release_id: str | None = None,
) -> RunExport:
    """Merge loadgen rows with agent logs into one export.

    When a release id is given, markers are restricted to it; an id that
    appears in no log is an error.
    """
    export = RunExport(rows=list(rows))
    seen_release = release_id is None
    for path in log_paths:
        markers, results = read_agent_log(path, release_id=release_id)
        if markers or results:
            seen_release = True
        export.markers.extend(markers)
        export.results.extend(results)
    if not seen_release:
        raise UnknownRelease(release_id or "")
    export.markers.sort(key=lambda m: m.ts_ms)
    return export


def export_run(export: RunExport, out_base: Path | str, formats: Sequence[str] = ("csv", "json")) -> dict[str, Path]:
    """Write `<base>.csv`, `<base>.markers.csv` and/or `<base>.json`."""
    out_base = Path(out_base)
    written: dict[str, Path] = {}
    if "csv" in formats:
        written["rows"] = write_rows_csv(export.rows, out_base.with_suffix(".csv"))
        written["markers"] = write_markers_csv(
            export.markers, out_base.with_suffix(".markers.csv")
        )
    if "json" in formats:
        payload = {
            "rows": [
                {
                    "ts_ms": r.ts_ms,
                    "node": r.node,
                    "variant": r.variant,
                    "duration_ms": r.duration_ms,
                    "error": r.error,
                    "proxied": r.proxied,
                    "stage": r.stage,
                }
                for r in export.rows
            ],
            "markers": [
                {
                    "ts_ms": m.ts_ms,
                    "node": m.node,
                    "release": m.release,
                    "stage": m.stage,
                    "kind": m.kind,
                    "status": m.status,
                }
                for m in export.markers
            ],
            "results": [r.to_dict() for r in export.results],
        }
        path = out_base.with_suffix(".json")
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        written["json"] = path
    return written


def load_export(out_base: Path | str) -> RunExport:
    out_base = Path(out_base)
    rows = read_rows_csv(out_base.with_suffix(".csv"))
    markers_path = out_base.with_suffix(".markers.csv")
    markers = read_markers_csv(markers_path) if markers_path.exists() else []
    return RunExport(rows=rows, markers=markers)
