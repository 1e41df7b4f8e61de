"""Per-variant telemetry aggregation, metric-condition evaluation, and the
upward merge used by interior tree nodes.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .strategy import (
    AppliesTo,
    Comparator,
    Aggregate,
    Metric,
    MetricCondition,
    StageStatus,
)
from .telemetry import CallRecord


@dataclass(frozen=True)
class VariantStats:
    call_count: int = 0
    error_count: int = 0
    error_rate: float = 0.0
    latency_min_ms: float | None = None
    latency_max_ms: float | None = None
    latency_mean_ms: float | None = None
    latency_median_ms: float | None = None
    # Sum of durations; carrying it makes merged means equal pooled means.
    latency_total_ms: float = 0.0
    median_approximate: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "call_count": self.call_count,
            "error_count": self.error_count,
            "error_rate": self.error_rate,
            "latency_min_ms": self.latency_min_ms,
            "latency_max_ms": self.latency_max_ms,
            "latency_mean_ms": self.latency_mean_ms,
            "latency_median_ms": self.latency_median_ms,
            "latency_total_ms": self.latency_total_ms,
            "median_approximate": self.median_approximate,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VariantStats":
        return cls(**{k: data.get(k, getattr(cls, k, None)) for k in (
            "call_count", "error_count", "error_rate", "latency_min_ms",
            "latency_max_ms", "latency_mean_ms", "latency_median_ms",
            "latency_total_ms", "median_approximate",
        )})


_EMPTY = VariantStats()


@dataclass(frozen=True)
class MetricsSummary:
    """Aggregated telemetry, keyed by variant label."""

    variants: Mapping[str, VariantStats] = field(default_factory=dict)

    def for_variant(self, label: str) -> VariantStats:
        return self.variants.get(label, _EMPTY)

    def total_calls(self) -> int:
        return sum(v.call_count for v in self.variants.values())

    def to_dict(self) -> dict[str, Any]:
        return {label: stats.to_dict() for label, stats in sorted(self.variants.items())}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricsSummary":
        return cls(variants={label: VariantStats.from_dict(v) for label, v in data.items()})


def _stats_from_durations(durations: list[float], errors: int, approx: bool = False) -> VariantStats:
    count = len(durations)
    if count == 0:
        return VariantStats(error_count=errors)
    total = sum(durations)
    return VariantStats(
        call_count=count,
        error_count=errors,
        error_rate=errors / count,
        latency_min_ms=min(durations),
        latency_max_ms=max(durations),
        latency_mean_ms=total / count,
        latency_median_ms=statistics.median(durations),
        latency_total_ms=total,
        median_approximate=approx,
    )


def aggregate(records: Iterable[CallRecord]) -> MetricsSummary:
    """Per-variant summary of raw call records; empty input is allowed.

    Mirror records count toward the new variant's statistics (that is the
    point of a dark launch) but are excluded from served-call counting by
    the stage runner, not here.
    """
    durations: dict[str, list[float]] = {}
    errors: dict[str, int] = {}
    for record in records:
        durations.setdefault(record.variant, []).append(record.duration_ms)
        errors[record.variant] = errors.get(record.variant, 0) + (1 if record.error else 0)
    return MetricsSummary(
        variants={
            label: _stats_from_durations(values, errors.get(label, 0))
            for label, values in durations.items()
        }
    )


def _weighted_median(pairs: list[tuple[float, int]]) -> float:
    """Median of child medians weighted by call count (approximation)."""
    expanded: list[tuple[float, int]] = sorted(pairs)
    total = sum(w for _, w in expanded)
    half = total / 2.0
    acc = 0
    for value, weight in expanded:
        acc += weight
        if acc >= half:
            return value
    return expanded[-1][0]


def merge_summaries(summaries: Iterable[MetricsSummary]) -> MetricsSummary:
    """Weighted upward merge across children.

    Counts and errors sum; min/max are global; the mean is call-count
    weighted (computed from summed totals, so it equals the pooled mean);
    the median is the call-count-weighted median of child medians and is
    flagged as approximate because raw records are unavailable here.
    """
    counts: dict[str, int] = {}
    errors: dict[str, int] = {}
    totals: dict[str, float] = {}
    mins: dict[str, float] = {}
    maxs: dict[str, float] = {}
    medians: dict[str, list[tuple[float, int]]] = {}
    single_child = True
    seen = 0

    for summary in summaries:
        seen += 1
        if seen > 1:
            single_child = False
        for label, stats in summary.variants.items():
            if stats.call_count == 0:
                errors[label] = errors.get(label, 0) + stats.error_count
                counts.setdefault(label, 0)
                continue
            counts[label] = counts.get(label, 0) + stats.call_count
            errors[label] = errors.get(label, 0) + stats.error_count
            totals[label] = totals.get(label, 0.0) + stats.latency_total_ms
            mins[label] = min(mins.get(label, stats.latency_min_ms), stats.latency_min_ms)
            maxs[label] = max(maxs.get(label, stats.latency_max_ms), stats.latency_max_ms)
            medians.setdefault(label, []).append(
                (stats.latency_median_ms, stats.call_count)
            )
            if stats.median_approximate:
                single_child = False

    merged: dict[str, VariantStats] = {}
    for label, count in counts.items():
        if count == 0:
            merged[label] = VariantStats(error_count=errors.get(label, 0))
            continue
        merged[label] = VariantStats(
            call_count=count,
            error_count=errors.get(label, 0),
            error_rate=errors.get(label, 0) / count,
            latency_min_ms=mins[label],
            latency_max_ms=maxs[label],
            latency_mean_ms=totals[label] / count,
            latency_median_ms=_weighted_median(medians[label]),
            latency_total_ms=totals[label],
            median_approximate=not (single_child and len(medians[label]) == 1),
        )
    return MetricsSummary(variants=merged)


@dataclass(frozen=True)
class ConditionOutcome:
    condition: MetricCondition
    variant: str
    observed: float | None
    passed: bool
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "metric": self.condition.metric.value,
            "aggregate": self.condition.aggregate.value,
            "comparator": self.condition.comparator.value,
            "threshold": self.condition.threshold,
            "applies_to": self.condition.applies_to.value,
            "variant": self.variant,
            "observed": self.observed,
            "passed": self.passed,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConditionOutcome":
        condition = MetricCondition(
            metric=Metric(data["metric"]),
            comparator=Comparator(data["comparator"]),
            threshold=data["threshold"],
            aggregate=Aggregate(data["aggregate"]),
            applies_to=AppliesTo(data["applies_to"]),
        )
        return cls(
            condition=condition,
            variant=data["variant"],
            observed=data.get("observed"),
            passed=data["passed"],
            reason=data.get("reason", ""),
        )


_COMPARE = {
    Comparator.LT: lambda a, b: a < b,
    Comparator.LE: lambda a, b: a <= b,
    Comparator.GT: lambda a, b: a > b,
    Comparator.GE: lambda a, b: a >= b,
}


def _observed_value(stats: VariantStats, condition: MetricCondition) -> float | None:
    if condition.metric is Metric.ERROR_RATE:
        # A variant with no traffic has error rate 0 by definition.
        return stats.error_rate if stats.call_count else 0.0
    if stats.call_count == 0:
        return None
    return {
        Aggregate.MIN: stats.latency_min_ms,
        Aggregate.MAX: stats.latency_max_ms,
        Aggregate.MEAN: stats.latency_mean_ms,
        Aggregate.MEDIAN: stats.latency_median_ms,
    }[condition.aggregate]


def evaluate_conditions(
    summary: MetricsSummary,
    conditions: Iterable[MetricCondition],
    base_label: str,
    new_label: str,
) -> list[ConditionOutcome]:
    """Evaluate every condition against the variant(s) it applies to.

    The stage passes iff every outcome passes. A latency condition against a
    variant that saw no traffic fails with reason "no data": silence cannot
    certify a version.
    """
    outcomes: list[ConditionOutcome] = []
    for condition in conditions:
        if condition.applies_to is AppliesTo.NEW:
            labels = [new_label]
        elif condition.applies_to is AppliesTo.BASE:
            labels = [base_label]
        else:
            labels = [base_label, new_label]
        for label in labels:
            stats = summary.for_variant(label)
            observed = _observed_value(stats, condition)
            if observed is None:
                outcomes.append(
                    ConditionOutcome(condition, label, None, False, reason="no data")
                )
                continue
            passed = _COMPARE[condition.comparator](observed, condition.threshold)
            outcomes.append(ConditionOutcome(condition, label, observed, passed))
    return outcomes


def all_passed(outcomes: Iterable[ConditionOutcome]) -> bool:
    return all(outcome.passed for outcome in outcomes)


@dataclass(frozen=True)
class StageResult:
    """Terminal outcome of one stage, as reported to the parent."""

    stage_name: str
    status: StageStatus
    summary: MetricsSummary
    outcomes: tuple[ConditionOutcome, ...] = ()
    started_ts: float = 0.0
    ended_ts: float = 0.0
    node_id: str = ""
    losses: int = 0
    discarded_late: int = 0
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage_name,
            "status": self.status.value,
            "summary": self.summary.to_dict(),
            "outcomes": [o.to_dict() for o in self.outcomes],
            "started_ts": self.started_ts,
            "ended_ts": self.ended_ts,
            "node": self.node_id,
            "losses": self.losses,
            "discarded_late": self.discarded_late,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageResult":
        return cls(
            stage_name=data["stage"],
            status=StageStatus(data["status"]),
            summary=MetricsSummary.from_dict(data.get("summary", {})),
            outcomes=tuple(ConditionOutcome.from_dict(o) for o in data.get("outcomes", [])),
            started_ts=data.get("started_ts", 0.0),
            ended_ts=data.get("ended_ts", 0.0),
            node_id=data.get("node", ""),
            losses=data.get("losses", 0),
            discarded_late=data.get("discarded_late", 0),
            detail=data.get("detail", ""),
        )


def merge_results(stage_name: str, results: Iterable[StageResult]) -> StageResult:
    """Aggregate child results for one stage into the upward report."""
    results = list(results)
    status = StageStatus.COMPLETED
    if any(r.status is StageStatus.ERROR for r in results):
        status = StageStatus.ERROR
    elif any(r.status is StageStatus.FAILURE for r in results):
        status = StageStatus.FAILURE
    outcomes: list[ConditionOutcome] = []
    for r in results:
        outcomes.extend(r.outcomes)
    return StageResult(
        stage_name=stage_name,
        status=status,
        summary=merge_summaries(r.summary for r in results),
        outcomes=tuple(outcomes),
        started_ts=min((r.started_ts for r in results), default=0.0),
        ended_ts=max((r.ended_ts for r in results), default=0.0),
        losses=sum(r.losses for r in results),
        discarded_late=sum(r.discarded_late for r in results),
    )
