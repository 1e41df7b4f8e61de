from __future__ import annotations

import random
import statistics
import time

from hypothesis import given, strategies as st

from canarytree.metrics import (
    MetricsSummary,
    StageResult,
    VariantStats,
    aggregate,
    all_passed,
    evaluate_conditions,
    merge_results,
    merge_summaries,
)
from canarytree.strategy import (
    Aggregate,
    AppliesTo,
    Comparator,
    Metric,
    MetricCondition,
    StageStatus,
)
from canarytree.telemetry import CallRecord


def record(variant="v1", duration=10.0, error=False, mirror=False):
    return CallRecord(
        ts=time.time(), stage="s", variant=variant, duration_ms=duration, error=error, mirror=mirror
    )


def dyadic(rng: random.Random, lo=1.0, hi=500.0) -> float:
    # Multiples of 1/1024 keep float sums exact in any order.
    return round(rng.uniform(lo, hi) * 1024) / 1024.0


def brute_force(records):
    """Independent recomputation used as the aggregation oracle."""
    out = {}
    for variant in {r.variant for r in records}:
        durations = sorted(r.duration_ms for r in records if r.variant == variant)
        errs = sum(1 for r in records if r.variant == variant and r.error)
        n = len(durations)
        mid = n // 2
        median = durations[mid] if n % 2 else (durations[mid - 1] + durations[mid]) / 2.0
        out[variant] = {
            "count": n,
            "errors": errs,
            "error_rate": errs / n,
            "min": durations[0],
            "max": durations[-1],
            "mean": sum(durations) / n,
            "median": median,
        }
    return out


def test_simple_examples():
    summary = aggregate([record(duration=d) for d in (10, 20, 30)])
    stats = summary.for_variant("v1")
    assert stats.latency_min_ms == 10
    assert stats.latency_median_ms == 20
    assert stats.latency_mean_ms == 20
    assert stats.latency_max_ms == 30

    summary = aggregate([record(duration=d) for d in (10, 20, 30, 40)])
    assert summary.for_variant("v1").latency_median_ms == 25  # midpoint rule


def test_empty_input_allowed():
    assert aggregate([]).variants == {}
    assert aggregate([]).for_variant("v1").call_count == 0


def test_summary_invariants_and_oracle_match():
    rng = random.Random(1234)
    for trial in range(100):
        records = [
            record(
                variant=rng.choice(["v1", "v2"]),
                duration=dyadic(rng),
                error=rng.random() < 0.1,
            )
            for _ in range(rng.randint(1, 400))
        ]
        summary = aggregate(records)
        oracle = brute_force(records)
        for variant, expected in oracle.items():
            stats = summary.for_variant(variant)
            assert stats.call_count == expected["count"]
            assert stats.error_count == expected["errors"]
            assert stats.error_rate == expected["error_rate"]
            assert stats.latency_min_ms == expected["min"]
            assert stats.latency_max_ms == expected["max"]
            assert stats.latency_mean_ms == expected["mean"]
            assert stats.latency_median_ms == expected["median"]
            assert stats.latency_min_ms <= stats.latency_median_ms <= stats.latency_max_ms
            assert stats.latency_min_ms <= stats.latency_mean_ms <= stats.latency_max_ms


@given(st.lists(st.floats(min_value=0.5, max_value=900), min_size=1, max_size=60), st.randoms())
def test_aggregate_permutation_invariant(durations, rnd):
    durations = [round(d * 1024) / 1024.0 for d in durations]
    records = [record(duration=d) for d in durations]
    shuffled = list(records)
    rnd.shuffle(shuffled)
    assert aggregate(records) == aggregate(shuffled)


def test_merge_weighted_mean_example():
    children = [
        MetricsSummary(variants={"v2": VariantStats(
            call_count=100, error_count=0, error_rate=0.0, latency_min_ms=20,
            latency_max_ms=20, latency_mean_ms=20, latency_median_ms=20, latency_total_ms=2000,
        )}),
        MetricsSummary(variants={"v2": VariantStats(
            call_count=300, error_count=0, error_rate=0.0, latency_min_ms=40,
            latency_max_ms=40, latency_mean_ms=40, latency_median_ms=40, latency_total_ms=12000,
        )}),
    ]
    merged = merge_summaries(children)
    assert merged.for_variant("v2").latency_mean_ms == 35
    assert merged.for_variant("v2").median_approximate is True


def test_merge_single_child_is_identity():
    rng = random.Random(7)
    records = [record(duration=dyadic(rng)) for _ in range(50)]
    summary = aggregate(records)
    merged = merge_summaries([summary])
    assert merged.for_variant("v1") == summary.for_variant("v1")


def test_merge_matches_pooled_oracle():
    rng = random.Random(99)
    for _ in range(100):
        pools = []
        all_records = []
        for _ in range(rng.randint(1, 5)):
            chunk = [
                record(
                    variant=rng.choice(["v1", "v2"]),
                    duration=dyadic(rng),
                    error=rng.random() < 0.05,
                )
                for _ in range(rng.randint(1, 200))
            ]
            pools.append(aggregate(chunk))
            all_records.extend(chunk)
        merged = merge_summaries(pools)
        oracle = brute_force(all_records)
        for variant, expected in oracle.items():
            stats = merged.for_variant(variant)
            assert stats.call_count == expected["count"]
            assert stats.error_count == expected["errors"]
            assert stats.error_rate == expected["error_rate"]
            assert stats.latency_min_ms == expected["min"]
            assert stats.latency_max_ms == expected["max"]
            assert stats.latency_mean_ms == expected["mean"]


def condition(metric=Metric.RESPONSE_TIME, aggregate_=Aggregate.MEDIAN,
              comparator=Comparator.LE, threshold=100.0, applies=AppliesTo.NEW):
    return MetricCondition(
        metric=metric, comparator=comparator, threshold=threshold,
        aggregate=aggregate_, applies_to=applies,
    )


def test_conditions_examples():
    summary = aggregate(
        [record(variant="v2", duration=80.0), record(variant="v1", duration=120.0)]
    )
    outcomes = evaluate_conditions(summary, [condition(threshold=100)], "v1", "v2")
    assert outcomes[0].passed and outcomes[0].observed == 80.0

    summary = aggregate(
        [record(variant="v2", error=True)] + [record(variant="v2") for _ in range(19)]
    )
    outcomes = evaluate_conditions(
        summary,
        [condition(metric=Metric.ERROR_RATE, threshold=0.02, aggregate_=Aggregate.MEAN)],
        "v1",
        "v2",
    )
    assert not outcomes[0].passed
    assert outcomes[0].observed == 0.05


def test_condition_both_evaluates_both_variants():
    summary = aggregate(
        [record(variant="v1", duration=90.0), record(variant="v2", duration=80.0)]
    )
    outcomes = evaluate_conditions(
        summary, [condition(applies=AppliesTo.BOTH, threshold=85)], "v1", "v2"
    )
    assert [(o.variant, o.passed) for o in outcomes] == [("v1", False), ("v2", True)]
    assert not all_passed(outcomes)


def test_latency_condition_on_empty_variant_fails_no_data():
    summary = aggregate([record(variant="v1", duration=10.0)])
    outcomes = evaluate_conditions(summary, [condition()], "v1", "v2")
    assert outcomes[0].passed is False
    assert outcomes[0].reason == "no data"


def test_error_rate_on_empty_variant_is_zero():
    summary = aggregate([record(variant="v1", duration=10.0)])
    outcomes = evaluate_conditions(
        summary, [condition(metric=Metric.ERROR_RATE, threshold=0.02)], "v1", "v2"
    )
    assert outcomes[0].observed == 0.0
    assert outcomes[0].passed is True


def test_vacuous_conditions_pass():
    assert all_passed(evaluate_conditions(aggregate([]), [], "v1", "v2"))


def test_stage_result_round_trip():
    summary = aggregate([record(duration=12.0)])
    outcomes = evaluate_conditions(summary, [condition(applies=AppliesTo.BASE, threshold=20)], "v1", "v2")
    result = StageResult(
        stage_name="canary",
        status=StageStatus.COMPLETED,
        summary=summary,
        outcomes=tuple(outcomes),
        started_ts=1.0,
        ended_ts=2.0,
        node_id="a1",
        losses=1,
    )
    assert StageResult.from_dict(result.to_dict()) == result


def test_merge_results_status_precedence():
    ok = StageResult("s", StageStatus.COMPLETED, aggregate([record()]))
    fail = StageResult("s", StageStatus.FAILURE, aggregate([record()]))
    err = StageResult("s", StageStatus.ERROR, aggregate([record()]))
    assert merge_results("s", [ok, ok]).status is StageStatus.COMPLETED
    assert merge_results("s", [ok, fail]).status is StageStatus.FAILURE
    assert merge_results("s", [fail, err]).status is StageStatus.ERROR


def test_median_statistics_module_agreement():
    rng = random.Random(5)
    values = [dyadic(rng) for _ in range(101)]
    summary = aggregate([record(duration=v) for v in values])
    assert summary.for_variant("v1").latency_median_ms == statistics.median(values)
