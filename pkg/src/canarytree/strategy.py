"""Release strategy model: domain types, YAML schema, and the two status
state machines shared by every node in the tree.

All values are immutable after parsing and safe to share across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

import yaml

from .errors import IllegalTransition, StrategySyntaxError, ValidationError


# ---------------------------------------------------------------------------
# status state machines
# ---------------------------------------------------------------------------

class ReleaseStatus(enum.Enum):
    """Per-child state of a release; values are the wire strings."""

    NO = "No"
    TODO = "Todo"
    DOING = "Doing"
    DONE = "Done"
    FAILED = "Failed"


class StageStatus(enum.Enum):
    """Per-child state of one stage; values are the wire strings."""

    PENDING = "Pending"
    IN_PROGRESS = "InProgress"
    WAIT_FOR_SIGNAL = "WaitForSignal"
    SHOULD_END = "ShouldEnd"
    COMPLETED = "Completed"
    FAILURE = "Failure"
    ERROR = "Error"


TERMINAL_STAGE_STATUSES = frozenset(
    {StageStatus.COMPLETED, StageStatus.FAILURE, StageStatus.ERROR}
)


class ReleaseEvent(enum.Enum):
    MARK_TODO = "MarkTodo"
    CHILD_FETCHED = "ChildFetched"
    ALL_STAGES_COMPLETED = "AllStagesCompleted"
    ANY_STAGE_FAILED = "AnyStageFailed"


class StageEvent(enum.Enum):
    START = "Start"
    END_CONDITIONS_MET = "EndConditionsMet"
    PARENT_SIGNAL = "ParentSignal"
    SUCCEED = "Succeed"
    FAIL = "Fail"
    ABORT = "Abort"


_RELEASE_TABLE: dict[tuple[ReleaseStatus, ReleaseEvent], ReleaseStatus] = {
    (ReleaseStatus.NO, ReleaseEvent.MARK_TODO): ReleaseStatus.TODO,
    (ReleaseStatus.TODO, ReleaseEvent.CHILD_FETCHED): ReleaseStatus.DOING,
    (ReleaseStatus.DOING, ReleaseEvent.ALL_STAGES_COMPLETED): ReleaseStatus.DONE,
    (ReleaseStatus.DOING, ReleaseEvent.ANY_STAGE_FAILED): ReleaseStatus.FAILED,
}

_STAGE_TABLE: dict[tuple[StageStatus, StageEvent], StageStatus] = {
    (StageStatus.PENDING, StageEvent.START): StageStatus.IN_PROGRESS,
    (StageStatus.IN_PROGRESS, StageEvent.END_CONDITIONS_MET): StageStatus.WAIT_FOR_SIGNAL,
    (StageStatus.IN_PROGRESS, StageEvent.SUCCEED): StageStatus.COMPLETED,
    (StageStatus.IN_PROGRESS, StageEvent.FAIL): StageStatus.FAILURE,
    (StageStatus.IN_PROGRESS, StageEvent.ABORT): StageStatus.ERROR,
    (StageStatus.WAIT_FOR_SIGNAL, StageEvent.PARENT_SIGNAL): StageStatus.SHOULD_END,
    (StageStatus.SHOULD_END, StageEvent.SUCCEED): StageStatus.COMPLETED,
    (StageStatus.SHOULD_END, StageEvent.FAIL): StageStatus.FAILURE,
    (StageStatus.SHOULD_END, StageEvent.ABORT): StageStatus.ERROR,
}

# Edges as (from, to) pairs, for conformance checks over observed sequences.
RELEASE_GRAPH = frozenset((src, dst) for (src, _), dst in _RELEASE_TABLE.items())
STAGE_GRAPH = frozenset((src, dst) for (src, _), dst in _STAGE_TABLE.items())


def transition_release(current: ReleaseStatus, event: ReleaseEvent) -> ReleaseStatus:
    """Next release status, or IllegalTransition for pairs outside the table."""
    try:
        return _RELEASE_TABLE[(current, event)]
    except KeyError:
        raise IllegalTransition(current.value, event.value) from None


def transition_stage(current: StageStatus, event: StageEvent) -> StageStatus:
    """Next stage status, or IllegalTransition for pairs outside the table."""
    try:
        return _STAGE_TABLE[(current, event)]
    except KeyError:
        raise IllegalTransition(current.value, event.value) from None


# ---------------------------------------------------------------------------
# strategy vocabulary
# ---------------------------------------------------------------------------

class StageType(enum.Enum):
    SEQUENTIAL = "sequential"
    WAIT_FOR_SIGNAL = "wait_for_signal"


class RoutingMethod(enum.Enum):
    CLIENT_ID_HASH = "client_id"
    HEADER = "header"
    RANDOM = "random"


class Metric(enum.Enum):
    ERROR_RATE = "error_rate"
    RESPONSE_TIME = "response_time"


class Aggregate(enum.Enum):
    MIN = "min"
    MAX = "max"
    MEAN = "mean"
    MEDIAN = "median"


class Comparator(enum.Enum):
    LT = "lt"
    LE = "le"
    GT = "gt"
    GE = "ge"


class AppliesTo(enum.Enum):
    NEW = "new"
    BASE = "base"
    BOTH = "both"


class StageAction(enum.Enum):
    NEXT_STAGE = "next_stage"
    ROLLBACK = "rollback"
    ROLLOUT = "rollout"
    END = "end"


class RolloutKind(enum.Enum):
    GLOBAL_INCREMENTAL = "global_incremental"
    LOCAL_SEQUENTIAL = "local_sequential"
    REGIONAL_INCREMENTAL = "regional_incremental"
    REGIONAL_SEQUENTIAL = "regional_sequential"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FunctionRef:
    """One deployable function version."""

    name: str
    version: str
    artifact: str = ""
    runtime: str = ""


@dataclass(frozen=True)
class EndConditions:
    """Both thresholds must be met before a stage may be evaluated."""

    min_calls: int = 0
    min_duration_s: float = 0.0


@dataclass(frozen=True)
class MetricCondition:
    metric: Metric
    comparator: Comparator
    threshold: float
    aggregate: Aggregate = Aggregate.MEAN
    applies_to: AppliesTo = AppliesTo.NEW


@dataclass(frozen=True)
class Stage:
    """One phase of a live test.

    ``regions``, ``plan_step``, ``auto_end`` and ``promotion`` extend the
    developer-facing schema: ``regions`` scopes a stage geographically, the
    other three are written by plan derivation (step index, parent-gated
    termination, final replace-proxy-with-new step) and round-trip through
    serialization so derived strategies survive the wire.
    """

    name: str
    stage_type: StageType
    function: str
    base: str
    new: str
    routing: RoutingMethod
    traffic_new_percent: float
    mirror: bool = False
    end_conditions: EndConditions = field(default_factory=EndConditions)
    metric_conditions: tuple[MetricCondition, ...] = ()
    on_success: StageAction = StageAction.NEXT_STAGE
    on_failure: StageAction = StageAction.ROLLBACK
    regions: frozenset[str] | None = None
    plan_step: int | None = None
    auto_end: bool = False
    promotion: bool = False


@dataclass(frozen=True)
class ReleaseStrategy:
    """Declarative description of a multi-phase live test."""

    id: str
    functions: tuple[FunctionRef, ...]
    rollback: FunctionRef
    stages: tuple[Stage, ...]
    geo_scope: frozenset[str] | None = None
    rollout_kind: RolloutKind = RolloutKind.GLOBAL_INCREMENTAL
    rollout_region: str | None = None

    def function_for(self, name: str, version: str) -> FunctionRef:
        for fn in self.functions:
            if fn.name == name and fn.version == version:
                return fn
        raise KeyError(f"{name}:{version} not declared")

    def stage_named(self, name: str) -> Stage:
        for stage in self.stages:
            if stage.name == name:
                return stage
        raise KeyError(name)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _require(mapping: Mapping[str, Any], key: str, path: str) -> Any:
    if key not in mapping:
        raise ValidationError(f"{path}.{key}" if path else key, "missing required key")
    return mapping[key]


def _check_keys(mapping: Mapping[str, Any], allowed: Iterable[str], path: str) -> None:
    unknown = set(mapping) - set(allowed)
    if unknown:
        key = sorted(unknown)[0]
        raise ValidationError(f"{path}.{key}" if path else key, "unknown key")


def _as_mapping(value: Any, path: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise ValidationError(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _as_list(value: Any, path: str) -> list[Any]:
    if not isinstance(value, list):
        raise ValidationError(path, f"expected a list, got {type(value).__name__}")
    return value


def _as_str(value: Any, path: str) -> str:
    if not isinstance(value, str) or not value:
        raise ValidationError(path, "expected a non-empty string")
    return value


def _as_number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(path, "expected a number")
    return float(value)


def _as_bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ValidationError(path, "expected a boolean")
    return value


def _enum(cls: type, value: Any, path: str):
    try:
        return cls(value)
    except ValueError:
        options = "|".join(member.value for member in cls)
        raise ValidationError(path, f"expected one of {options}, got {value!r}") from None


def _parse_function(raw: Any, path: str) -> FunctionRef:
    data = _as_mapping(raw, path)
    _check_keys(data, ("name", "version", "artifact", "runtime"), path)
    return FunctionRef(
        name=_as_str(_require(data, "name", path), f"{path}.name"),
        version=_as_str(_require(data, "version", path), f"{path}.version"),
        artifact=str(data.get("artifact", "")),
        runtime=str(data.get("runtime", "")),
    )


def _parse_end_conditions(raw: Any, path: str) -> EndConditions:
    data = _as_mapping(raw, path)
    _check_keys(data, ("min_calls", "min_duration_s"), path)
    min_calls = data.get("min_calls", 0)
    if isinstance(min_calls, bool) or not isinstance(min_calls, int) or min_calls < 0:
        raise ValidationError(f"{path}.min_calls", "expected a non-negative integer")
    min_duration = _as_number(data.get("min_duration_s", 0), f"{path}.min_duration_s")
    if min_duration < 0:
        raise ValidationError(f"{path}.min_duration_s", "expected a non-negative duration")
    return EndConditions(min_calls=min_calls, min_duration_s=min_duration)


def _parse_condition(raw: Any, path: str) -> MetricCondition:
    data = _as_mapping(raw, path)
    _check_keys(data, ("metric", "aggregate", "comparator", "threshold", "applies_to"), path)
    metric = _enum(Metric, _require(data, "metric", path), f"{path}.metric")
    threshold = _as_number(_require(data, "threshold", path), f"{path}.threshold")
    if metric is Metric.ERROR_RATE and not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"{path}.threshold", "error_rate threshold must be a ratio in [0, 1]")
    return MetricCondition(
        metric=metric,
        comparator=_enum(Comparator, _require(data, "comparator", path), f"{path}.comparator"),
        threshold=threshold,
        aggregate=_enum(Aggregate, data.get("aggregate", "mean"), f"{path}.aggregate"),
        applies_to=_enum(AppliesTo, data.get("applies_to", "new"), f"{path}.applies_to"),
    )


_STAGE_KEYS = (
    "name", "type", "function", "variants", "routing", "traffic_new_percent",
    "mirror", "end_conditions", "metric_conditions", "on_success", "on_failure",
    "regions", "plan_step", "auto_end", "promotion",
)


def _parse_stage(raw: Any, path: str) -> Stage:
    data = _as_mapping(raw, path)
    _check_keys(data, _STAGE_KEYS, path)
    variants = _as_mapping(_require(data, "variants", path), f"{path}.variants")
    _check_keys(variants, ("base", "new"), f"{path}.variants")
    percent = _as_number(_require(data, "traffic_new_percent", path), f"{path}.traffic_new_percent")
    if not 0.0 <= percent <= 100.0:
        raise ValidationError(f"{path}.traffic_new_percent", "must be in [0, 100]")

    regions: frozenset[str] | None = None
    if data.get("regions") is not None:
        raw_regions = _as_list(data["regions"], f"{path}.regions")
        regions = frozenset(_as_str(r, f"{path}.regions[{i}]") for i, r in enumerate(raw_regions))

    plan_step = data.get("plan_step")
    if plan_step is not None and (isinstance(plan_step, bool) or not isinstance(plan_step, int)):
        raise ValidationError(f"{path}.plan_step", "expected an integer")

    return Stage(
        name=_as_str(_require(data, "name", path), f"{path}.name"),
        stage_type=_enum(StageType, _require(data, "type", path), f"{path}.type"),
        function=_as_str(_require(data, "function", path), f"{path}.function"),
        base=_as_str(_require(variants, "base", f"{path}.variants"), f"{path}.variants.base"),
        new=_as_str(_require(variants, "new", f"{path}.variants"), f"{path}.variants.new"),
        routing=_enum(RoutingMethod, _require(data, "routing", path), f"{path}.routing"),
        traffic_new_percent=percent,
        mirror=_as_bool(data.get("mirror", False), f"{path}.mirror"),
        end_conditions=_parse_end_conditions(data.get("end_conditions", {}), f"{path}.end_conditions"),
        metric_conditions=tuple(
            _parse_condition(c, f"{path}.metric_conditions[{i}]")
            for i, c in enumerate(_as_list(data.get("metric_conditions", []), f"{path}.metric_conditions"))
        ),
        on_success=_enum(StageAction, data.get("on_success", "next_stage"), f"{path}.on_success"),
        on_failure=_enum(StageAction, data.get("on_failure", "rollback"), f"{path}.on_failure"),
        regions=regions,
        plan_step=plan_step,
        auto_end=_as_bool(data.get("auto_end", False), f"{path}.auto_end"),
        promotion=_as_bool(data.get("promotion", False), f"{path}.promotion"),
    )


_TOP_KEYS = ("id", "functions", "rollback", "stages", "geo_scope", "rollout")


def strategy_from_dict(data: Mapping[str, Any]) -> ReleaseStrategy:
    """Validate a decoded document and build the immutable strategy."""
    data = _as_mapping(data, "")
    _check_keys(data, _TOP_KEYS, "")

    strategy_id = _as_str(_require(data, "id", ""), "id")
    functions = tuple(
        _parse_function(f, f"functions[{i}]")
        for i, f in enumerate(_as_list(_require(data, "functions", ""), "functions"))
    )
    if not functions:
        raise ValidationError("functions", "at least one function is required")
    seen: set[tuple[str, str]] = set()
    for i, fn in enumerate(functions):
        key = (fn.name, fn.version)
        if key in seen:
            raise ValidationError(f"functions[{i}]", f"duplicate (name, version) {key}")
        seen.add(key)

    rollback_raw = _as_mapping(_require(data, "rollback", ""), "rollback")
    _check_keys(rollback_raw, ("name", "version"), "rollback")
    rollback_key = (
        _as_str(_require(rollback_raw, "name", "rollback"), "rollback.name"),
        _as_str(_require(rollback_raw, "version", "rollback"), "rollback.version"),
    )
    if rollback_key not in seen:
        raise ValidationError("rollback", f"references undeclared version {rollback_key}")
    rollback = next(f for f in functions if (f.name, f.version) == rollback_key)

    stages = tuple(
        _parse_stage(s, f"stages[{i}]")
        for i, s in enumerate(_as_list(_require(data, "stages", ""), "stages"))
    )
    if not stages:
        raise ValidationError("stages", "at least one stage is required")
    stage_names: set[str] = set()
    for i, stage in enumerate(stages):
        if stage.name in stage_names:
            raise ValidationError(f"stages[{i}].name", f"duplicate stage name {stage.name!r}")
        stage_names.add(stage.name)
        for role, version in (("base", stage.base), ("new", stage.new)):
            if (stage.function, version) not in seen:
                raise ValidationError(
                    f"stages[{i}].variants.{role}",
                    f"references undeclared version ({stage.function!r}, {version!r})",
                )

    geo_scope: frozenset[str] | None = None
    if data.get("geo_scope") is not None:
        raw_scope = _as_list(data["geo_scope"], "geo_scope")
        geo_scope = frozenset(_as_str(r, f"geo_scope[{i}]") for i, r in enumerate(raw_scope))

    rollout_kind = RolloutKind.GLOBAL_INCREMENTAL
    rollout_region: str | None = None
    if data.get("rollout") is not None:
        rollout = _as_mapping(data["rollout"], "rollout")
        _check_keys(rollout, ("kind", "region"), "rollout")
        rollout_kind = _enum(RolloutKind, rollout.get("kind", "global_incremental"), "rollout.kind")
        if rollout.get("region") is not None:
            rollout_region = _as_str(rollout["region"], "rollout.region")
    if rollout_kind in (RolloutKind.REGIONAL_INCREMENTAL, RolloutKind.REGIONAL_SEQUENTIAL):
        if rollout_region is None:
            raise ValidationError("rollout.region", "regional rollout kinds require a region")

    return ReleaseStrategy(
        id=strategy_id,
        functions=functions,
        rollback=rollback,
        stages=stages,
        geo_scope=geo_scope,
        rollout_kind=rollout_kind,
        rollout_region=rollout_region,
    )


def parse_strategy(text: str) -> ReleaseStrategy:
    """Parse and validate a YAML strategy document."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise StrategySyntaxError(f"malformed YAML: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ValidationError("", "top-level document must be a mapping")
    return strategy_from_dict(data)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _condition_to_dict(cond: MetricCondition) -> dict[str, Any]:
    return {
        "metric": cond.metric.value,
        "aggregate": cond.aggregate.value,
        "comparator": cond.comparator.value,
        "threshold": cond.threshold,
        "applies_to": cond.applies_to.value,
    }


def _stage_to_dict(stage: Stage) -> dict[str, Any]:
    out: dict[str, Any] = {
        "name": stage.name,
        "type": stage.stage_type.value,
        "function": stage.function,
        "variants": {"base": stage.base, "new": stage.new},
        "routing": stage.routing.value,
        "traffic_new_percent": stage.traffic_new_percent,
        "mirror": stage.mirror,
        "end_conditions": {
            "min_calls": stage.end_conditions.min_calls,
            "min_duration_s": stage.end_conditions.min_duration_s,
        },
        "metric_conditions": [_condition_to_dict(c) for c in stage.metric_conditions],
        "on_success": stage.on_success.value,
        "on_failure": stage.on_failure.value,
    }
    if stage.regions is not None:
        out["regions"] = sorted(stage.regions)
    if stage.plan_step is not None:
        out["plan_step"] = stage.plan_step
    if stage.auto_end:
        out["auto_end"] = True
    if stage.promotion:
        out["promotion"] = True
    return out


def strategy_to_dict(strategy: ReleaseStrategy) -> dict[str, Any]:
    out: dict[str, Any] = {
        "id": strategy.id,
        "functions": [
            {"name": f.name, "version": f.version, "artifact": f.artifact, "runtime": f.runtime}
            for f in strategy.functions
        ],
        "rollback": {"name": strategy.rollback.name, "version": strategy.rollback.version},
        "stages": [_stage_to_dict(s) for s in strategy.stages],
    }
    if strategy.geo_scope is not None:
        out["geo_scope"] = sorted(strategy.geo_scope)
    rollout: dict[str, Any] = {"kind": strategy.rollout_kind.value}
    if strategy.rollout_region is not None:
        rollout["region"] = strategy.rollout_region
    out["rollout"] = rollout
    return out


def serialize_strategy(strategy: ReleaseStrategy) -> str:
    """YAML round-trip form; parse_strategy(serialize_strategy(s)) == s."""
    return yaml.safe_dump(strategy_to_dict(strategy), sort_keys=False)


def scoped_stage(stage: Stage, **changes: Any) -> Stage:
    """Copy of a stage with selected fields replaced."""
    return replace(stage, **changes)
