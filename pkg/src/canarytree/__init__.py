"""Staged live testing for serverless functions across distributed
locations: declarative release strategies executed by a tree of release
managers and leaf agents, with a traffic-splitting proxy, geo-aware
rollout planning, and an operator harness.
"""

from .agent import Agent, InProcessParent, StageRun, end_conditions_met
from .backend import (
    Endpoint,
    InvokeRequest,
    InvokeResponse,
    LatencyModel,
    MockFunctionSpec,
    MockPlatform,
)
from .manager import Capabilities, NodeInfo, PollReply, ReleaseManager, aggregate_up
from .metrics import (
    ConditionOutcome,
    MetricsSummary,
    StageResult,
    VariantStats,
    aggregate,
    evaluate_conditions,
    merge_results,
    merge_summaries,
)
from .planner import (
    ChildArea,
    LocationInfo,
    RolloutPlan,
    derive_child_strategies,
    plan_global_incremental,
    plan_local_sequential,
    plan_regional_incremental,
    plan_regional_sequential,
)
from .proxy import ProxyFunction
from .routing import RequestMeta, RoutingConfig, RoutingDecision, route
from .strategy import (
    EndConditions,
    FunctionRef,
    MetricCondition,
    ReleaseStatus,
    ReleaseStrategy,
    Stage,
    StageStatus,
    parse_strategy,
    serialize_strategy,
    transition_release,
    transition_stage,
)
from .telemetry import CallRecord, RecordCollector, TelemetryEmitter, record_call

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "Capabilities",
    "CallRecord",
    "ChildArea",
    "ConditionOutcome",
    "EndConditions",
    "Endpoint",
    "FunctionRef",
    "InProcessParent",
    "InvokeRequest",
    "InvokeResponse",
    "LatencyModel",
    "LocationInfo",
    "MetricCondition",
    "MetricsSummary",
    "MockFunctionSpec",
    "MockPlatform",
    "NodeInfo",
    "PollReply",
    "ProxyFunction",
    "RecordCollector",
    "ReleaseManager",
    "ReleaseStatus",
    "ReleaseStrategy",
    "RequestMeta",
    "RolloutPlan",
    "RoutingConfig",
    "RoutingDecision",
    "Stage",
    "StageResult",
    "StageRun",
    "StageStatus",
    "TelemetryEmitter",
    "VariantStats",
    "aggregate",
    "aggregate_up",
    "derive_child_strategies",
    "end_conditions_met",
    "evaluate_conditions",
    "merge_results",
    "merge_summaries",
    "parse_strategy",
    "plan_global_incremental",
    "plan_local_sequential",
    "plan_regional_incremental",
    "plan_regional_sequential",
    "record_call",
    "route",
    "serialize_strategy",
    "transition_release",
    "transition_stage",
]
