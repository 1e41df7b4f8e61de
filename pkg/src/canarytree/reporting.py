"""Figure rendering for run exports.

Renders the two standard views next to the delimited output: client
latency over time with stage boundaries, and a direct-vs-proxied latency
comparison for overhead measurements.
"""

from __future__ import annotations

import statistics
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .export import ExportRow, RunExport


def render_latency_timeline(export: RunExport, out_path: Path | str, title: str = "latency over time") -> Path:
    """One panel per node: per-call latency, errors marked, stage starts as
    vertical boundaries."""
    out_path = Path(out_path)
    nodes = sorted({r.node for r in export.rows}) or [""]
    t0 = min((r.ts_ms for r in export.rows), default=0.0)

    fig, axes = plt.subplots(
        len(nodes), 1, figsize=(10, 2.8 * len(nodes)), sharex=True, squeeze=False
    )
    for ax, node in zip(axes[:, 0], nodes):
        rows = [r for r in export.rows if r.node == node]
        ok = [r for r in rows if not r.error]
        bad = [r for r in rows if r.error]
        proxied = [r for r in ok if r.proxied]
        direct = [r for r in ok if not r.proxied]
        if direct:
            ax.plot(
                [(r.ts_ms - t0) / 1000.0 for r in direct],
                [r.duration_ms for r in direct],
                ".", markersize=3, color="tab:gray", label="direct",
            )
        if proxied:
            ax.plot(
                [(r.ts_ms - t0) / 1000.0 for r in proxied],
                [r.duration_ms for r in proxied],
                ".", markersize=3, color="tab:blue", label="proxied",
            )
        if bad:
            ax.plot(
                [(r.ts_ms - t0) / 1000.0 for r in bad],
                [r.duration_ms for r in bad],
                "x", markersize=5, color="tab:red", label="error",
            )
        for marker in export.markers:
            if marker.node != node or marker.kind != "start":
                continue
            x = (marker.ts_ms - t0) / 1000.0
            ax.axvline(x, color="tab:green", alpha=0.4, linewidth=1)
            ax.annotate(
                marker.stage, (x, 1.0), xycoords=("data", "axes fraction"),
                fontsize=7, rotation=90, va="top", ha="right",
            )
        ax.set_ylabel(f"{node or 'run'}\nms")
        ax.legend(loc="upper left", fontsize=7)
    axes[-1, 0].set_xlabel("seconds since start")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def overhead_summary(direct: Sequence[ExportRow], proxied: Sequence[ExportRow]) -> dict[str, float]:
    direct_ok = [r.duration_ms for r in direct if not r.error]
    proxied_ok = [r.duration_ms for r in proxied if not r.error]
    direct_median = statistics.median(direct_ok) if direct_ok else 0.0
    proxied_median = statistics.median(proxied_ok) if proxied_ok else 0.0
    return {
        "direct_median_ms": direct_median,
        "proxied_median_ms": proxied_median,
        "overhead_ms": proxied_median - direct_median,
    }


def render_overhead_comparison(
    runs: Sequence[tuple[Sequence[ExportRow], Sequence[ExportRow]]],
    out_path: Path | str,
    title: str = "proxy overhead",
) -> Path:
    """Box plot of direct vs proxied latencies per run, plus the per-run
    median overhead."""
    out_path = Path(out_path)
    fig, (ax_box, ax_overhead) = plt.subplots(1, 2, figsize=(10, 4))

    data = []
    labels = []
    overheads = []
    for i, (direct, proxied) in enumerate(runs, start=1):
        data.append([r.duration_ms for r in direct if not r.error])
        labels.append(f"direct {i}")
        data.append([r.duration_ms for r in proxied if not r.error])
        labels.append(f"proxied {i}")
        overheads.append(overhead_summary(direct, proxied)["overhead_ms"])

    ax_box.boxplot(data, tick_labels=labels, showfliers=False)
    ax_box.set_ylabel("latency ms")
    ax_box.tick_params(axis="x", rotation=45)

    ax_overhead.bar(range(1, len(overheads) + 1), overheads, color="tab:blue")
    ax_overhead.set_xlabel("run")
    ax_overhead.set_ylabel("median overhead ms")
    ax_overhead.set_xticks(range(1, len(overheads) + 1))

    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
