"""Geo-aware gradual rollout planning.

Four plan shapes over a set of locations, plus the derivation step that
turns one strategy into per-child strategies. A plan is an ordered list of
steps; each step maps every in-scope location to the traffic percentage the
new version should receive there. Percentages never decrease per node, and
the final step is 100 everywhere in scope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .errors import EmptyRegion, InvalidLadder
from .strategy import (
    EndConditions,
    ReleaseStrategy,
    RolloutKind,
    Stage,
    StageAction,
    StageType,
)


@dataclass(frozen=True)
class LocationInfo:
    node_id: str
    region: str
    platform_kind: str = "mock"

    def to_dict(self) -> dict[str, str]:
        return {"node_id": self.node_id, "region": self.region, "platform_kind": self.platform_kind}

    @classmethod
    def from_dict(cls, data: Mapping[str, str]) -> "LocationInfo":
        return cls(
            node_id=data["node_id"],
            region=data["region"],
            platform_kind=data.get("platform_kind", "mock"),
        )


@dataclass(frozen=True)
class ChildArea:
    """What the planner needs to know about one child of a manager."""

    node_id: str
    kind: str  # "agent" | "rm"
    locations: tuple[LocationInfo, ...]


@dataclass(frozen=True)
class RolloutPlan:
    kind: RolloutKind
    steps: tuple[Mapping[str, float], ...]

    def node_ids(self) -> list[str]:
        seen: list[str] = []
        for step in self.steps:
            for node in step:
                if node not in seen:
                    seen.append(node)
        return seen

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind.value, "steps": [dict(sorted(s.items())) for s in self.steps]},
            indent=2,
        )


def _check_ladder(ladder: Sequence[float]) -> list[float]:
    values = [float(v) for v in ladder]
    if not values:
        raise InvalidLadder("ladder must not be empty")
    for prev, nxt in zip(values, values[1:]):
        if nxt <= prev:
            raise InvalidLadder(f"ladder must be strictly increasing, got {prev} then {nxt}")
    if any(v <= 0 or v > 100 for v in values):
        raise InvalidLadder("ladder values must lie in (0, 100]")
    if values[-1] != 100:
        raise InvalidLadder("ladder must end at 100")
    return values


def plan_global_incremental(
    locations: Sequence[LocationInfo], ladder: Sequence[float]
) -> RolloutPlan:
    """Every location carries the same percentage at every step."""
    values = _check_ladder(ladder)
    if not locations:
        return RolloutPlan(kind=RolloutKind.GLOBAL_INCREMENTAL, steps=())
    steps = tuple({loc.node_id: pct for loc in locations} for pct in values)
    return RolloutPlan(kind=RolloutKind.GLOBAL_INCREMENTAL, steps=steps)


def plan_local_sequential(
    locations: Sequence[LocationInfo], ladder: Sequence[float]
) -> RolloutPlan:
    """One location climbs the full ladder before the next one starts.

    Input order is the rollout order.
    """
    values = _check_ladder(ladder)
    steps: list[dict[str, float]] = []
    finished: list[str] = []
    pending = [loc.node_id for loc in locations]
    for loc in locations:
        pending.remove(loc.node_id)
        for pct in values:
            step = {node: 100.0 for node in finished}
            step[loc.node_id] = pct
            step.update({node: 0.0 for node in pending})
            steps.append(step)
        finished.append(loc.node_id)
    return RolloutPlan(kind=RolloutKind.LOCAL_SEQUENTIAL, steps=tuple(steps))


def _split_region(
    locations: Sequence[LocationInfo], region: str
) -> tuple[list[LocationInfo], list[LocationInfo]]:
    members = [loc for loc in locations if loc.region == region]
    others = [loc for loc in locations if loc.region != region]
    if not members:
        raise EmptyRegion(f"no location in region {region!r}")
    return members, others


def plan_regional_incremental(
    locations: Sequence[LocationInfo], region: str, ladder: Sequence[float]
) -> RolloutPlan:
    """Global Incremental restricted to one region; other locations stay 0.

    Subsequent regions are separate plans composed by the caller.
    """
    members, others = _split_region(locations, region)
    inner = plan_global_incremental(members, ladder)
    steps = tuple(
        {**step, **{loc.node_id: 0.0 for loc in others}} for step in inner.steps
    )
    return RolloutPlan(kind=RolloutKind.REGIONAL_INCREMENTAL, steps=steps)


def plan_regional_sequential(
    locations: Sequence[LocationInfo], region: str, ladder: Sequence[float]
) -> RolloutPlan:
    """Local Sequential restricted to one region; other locations stay 0."""
    members, others = _split_region(locations, region)
    inner = plan_local_sequential(members, ladder)
    steps = tuple(
        {**step, **{loc.node_id: 0.0 for loc in others}} for step in inner.steps
    )
    return RolloutPlan(kind=RolloutKind.REGIONAL_SEQUENTIAL, steps=steps)


def plan_for(
    kind: RolloutKind,
    locations: Sequence[LocationInfo],
    ladder: Sequence[float],
    region: str | None = None,
) -> RolloutPlan:
    if kind is RolloutKind.GLOBAL_INCREMENTAL:
        return plan_global_incremental(locations, ladder)
    if kind is RolloutKind.LOCAL_SEQUENTIAL:
        return plan_local_sequential(locations, ladder)
    if region is None:
        raise EmptyRegion("regional rollout kinds require a region")
    if kind is RolloutKind.REGIONAL_INCREMENTAL:
        return plan_regional_incremental(locations, region, ladder)
    return plan_regional_sequential(locations, region, ladder)


# ---------------------------------------------------------------------------
# strategy derivation
# ---------------------------------------------------------------------------

def find_rollout_segment(strategy: ReleaseStrategy) -> tuple[int, int] | None:
    """Trailing run of stages forming a gradual-rollout ladder.

    The run must share function, variants and routing, carry strictly
    increasing percentages, and be at least two stages long; its
    percentages become the plan ladder.
    """
    stages = strategy.stages
    end = len(stages)
    if end < 2:
        return None
    start = end - 1
    while start > 0:
        prev, cur = stages[start - 1], stages[start]
        if (
            prev.function == cur.function
            and prev.base == cur.base
            and prev.new == cur.new
            and prev.routing == cur.routing
            and prev.regions == cur.regions
            and not prev.mirror and not cur.mirror
            and prev.traffic_new_percent < cur.traffic_new_percent
        ):
            start -= 1
        else:
            break
    if end - start < 2:
        return None
    return start, end


def rollout_stage_name(step_index: int) -> str:
    return f"rollout-{step_index + 1:02d}"


def stage_applies(stage: Stage, area: ChildArea) -> bool:
    if stage.regions is None:
        return True
    return any(loc.region in stage.regions for loc in area.locations)


def _derived_step_stage(
    template: Stage,
    segment: Sequence[Stage],
    step_index: int,
    percent: float,
    is_final: bool,
    promote: bool,
) -> Stage:
    by_percent = {s.traffic_new_percent: s for s in segment}
    source = by_percent.get(percent, template)
    if promote:
        return replace(
            source,
            name=rollout_stage_name(step_index),
            stage_type=StageType.WAIT_FOR_SIGNAL,
            traffic_new_percent=percent,
            end_conditions=EndConditions(),
            metric_conditions=(),
            on_success=StageAction.ROLLOUT,
            plan_step=step_index,
            auto_end=True,
            promotion=True,
            regions=None,
        )
    return replace(
        source,
        name=rollout_stage_name(step_index),
        stage_type=StageType.WAIT_FOR_SIGNAL,
        traffic_new_percent=percent,
        on_success=source.on_success if is_final else StageAction.NEXT_STAGE,
        plan_step=step_index,
        auto_end=True,
        promotion=False,
        regions=None,
    )


def derive_child_strategies(
    strategy: ReleaseStrategy,
    plan: RolloutPlan | None,
    children: Sequence[ChildArea],
    promote_final_step: bool = False,
) -> dict[str, ReleaseStrategy]:
    """Per-child strategies realizing the plan.

    Agent children get the rollout segment expanded into one WaitForSignal
    stage per plan step at their location's percentage; steps where the
    percentage does not change are elided. Manager children get the segment
    verbatim and re-plan for their own children. Children left with no
    stages are omitted (they should not get this release).
    """
    segment_span = find_rollout_segment(strategy) if plan is not None else None
    out: dict[str, ReleaseStrategy] = {}
    for child in children:
        stages_out: list[Stage] = []
        for i, stage in enumerate(strategy.stages):
            if segment_span is not None and segment_span[0] <= i < segment_span[1]:
                if i != segment_span[0]:
                    continue
                segment = strategy.stages[segment_span[0]:segment_span[1]]
                if child.kind == "rm":
                    if any(step.get(loc.node_id, 0.0) > 0 for step in (plan.steps or ()) for loc in child.locations):
                        stages_out.extend(segment)
                    continue
                node_id = child.locations[0].node_id if child.locations else child.node_id
                previous = 0.0
                last = len(plan.steps) - 1
                for k, step in enumerate(plan.steps):
                    percent = float(step.get(node_id, previous))
                    promote = promote_final_step and k == last and percent == 100.0
                    if percent == previous and not promote:
                        continue
                    stages_out.append(
                        _derived_step_stage(
                            template=segment[-1],
                            segment=segment,
                            step_index=k,
                            percent=percent,
                            is_final=k == last,
                            promote=promote,
                        )
                    )
                    previous = percent
            else:
                if stage_applies(stage, child):
                    stages_out.append(stage)
        if stages_out:
            out[child.node_id] = replace(strategy, stages=tuple(stages_out))
    return out
