"""Interior tree node: tracks children and their capabilities, plans
strategy execution over its area, serves the pull protocol, advances the
per-child state machines, and aggregates results toward the root.

Every status mutation goes through the transition tables in
``strategy`` and is appended to a transcript, so observed sequences can be
checked against the legal graphs.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from .errors import (
    DuplicateNode,
    InsufficientCapabilities,
    NotWaiting,
    OutOfOrderResult,
    UnknownNode,
    UnknownRelease,
    ValidationError,
    WrongState,
)
from .metrics import MetricsSummary, StageResult, merge_results, merge_summaries
from .planner import (
    ChildArea,
    LocationInfo,
    RolloutPlan,
    derive_child_strategies,
    find_rollout_segment,
    plan_for,
    rollout_stage_name,
    stage_applies,
)
from .strategy import (
    ReleaseEvent,
    ReleaseStatus,
    ReleaseStrategy,
    StageAction,
    StageEvent,
    StageStatus,
    StageType,
    TERMINAL_STAGE_STATUSES,
    strategy_to_dict,
    transition_release,
    transition_stage,
)


@dataclass(frozen=True)
class Capabilities:
    platform_kinds: frozenset[str] = frozenset()
    locations: tuple[LocationInfo, ...] = ()

    @staticmethod
    def union(items: Iterable["Capabilities"]) -> "Capabilities":
        kinds: set[str] = set()
        locations: dict[str, LocationInfo] = {}
        for cap in items:
            kinds.update(cap.platform_kinds)
            for loc in cap.locations:
                locations[loc.node_id] = loc
        ordered = tuple(sorted(locations.values(), key=lambda l: l.node_id))
        return Capabilities(platform_kinds=frozenset(kinds), locations=ordered)

    def to_dict(self) -> dict[str, Any]:
        return {
            "platform_kinds": sorted(self.platform_kinds),
            "locations": [loc.to_dict() for loc in self.locations],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Capabilities":
        return cls(
            platform_kinds=frozenset(data.get("platform_kinds", [])),
            locations=tuple(LocationInfo.from_dict(l) for l in data.get("locations", [])),
        )


@dataclass(frozen=True)
class NodeInfo:
    node_id: str
    kind: str  # "rm" | "agent"
    region: str
    capabilities: Capabilities = field(default_factory=Capabilities)
    parent_address: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "kind": self.kind,
            "region": self.region,
            "capabilities": self.capabilities.to_dict(),
            "parent_address": self.parent_address,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NodeInfo":
        return cls(
            node_id=data["node_id"],
            kind=data["kind"],
            region=data.get("region", ""),
            capabilities=Capabilities.from_dict(data.get("capabilities", {})),
            parent_address=data.get("parent_address"),
        )


@dataclass
class PollReply:
    status: ReleaseStatus
    release_id: str | None = None
    start_stage: str | None = None
    end_stage: str | None = None
    abort: bool = False

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"status": self.status.value}
        if self.release_id is not None:
            out["release"] = self.release_id
        if self.start_stage is not None:
            out["start_stage"] = self.start_stage
        if self.end_stage is not None:
            out["end_stage"] = self.end_stage
        if self.abort:
            out["abort"] = True
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PollReply":
        return cls(
            status=ReleaseStatus(data["status"]),
            release_id=data.get("release"),
            start_stage=data.get("start_stage"),
            end_stage=data.get("end_stage"),
            abort=data.get("abort", False),
        )


@dataclass(frozen=True)
class TransitionRecord:
    entity: str  # "release" | "stage"
    node_id: str
    subject: str  # release id or stage name
    from_status: str
    event: str
    to_status: str


@dataclass
class _Phase:
    index: int
    name: str
    participants: tuple[str, ...]
    wait_for_signal: bool
    auto_end: bool
    promotion: bool = False
    # True when completing this stage legitimately ends the child's release
    # (its success action is rollout/end/rollback rather than next_stage).
    ends_on_success: bool = False


@dataclass
class _ChildLedger:
    node_id: str
    status: ReleaseStatus = ReleaseStatus.NO
    stage_names: list[str] = field(default_factory=list)
    stage_status: list[StageStatus] = field(default_factory=list)
    results: dict[str, StageResult] = field(default_factory=dict)

    def current_index(self) -> int | None:
        for i, status in enumerate(self.stage_status):
            if status not in TERMINAL_STAGE_STATUSES:
                return i
        return None

    def index_of(self, stage_name: str) -> int | None:
        try:
            return self.stage_names.index(stage_name)
        except ValueError:
            return None


@dataclass
class _ReleaseRun:
    release_id: str
    strategy: ReleaseStrategy
    plan: RolloutPlan | None
    phases: list[_Phase]
    child_docs: dict[str, dict[str, Any]]
    children: dict[str, _ChildLedger]
    adopted: bool = False
    phase_idx: int = 0
    aborting: bool = False
    overall: str = "running"  # running | done | failed
    manual_end: set[str] = field(default_factory=set)
    parent_gate: set[str] = field(default_factory=set)
    parent_permit: set[str] = field(default_factory=set)
    upward_queue: list[StageResult] = field(default_factory=list)
    phase_reported: set[str] = field(default_factory=set)

    def phase_named(self, name: str) -> _Phase | None:
        for phase in self.phases:
            if phase.name == name:
                return phase
        return None


def aggregate_up(results: Iterable[StageResult]) -> MetricsSummary:
    """Weighted merge of child summaries toward the root."""
    return merge_summaries(r.summary for r in results)


class ReleaseManager:
    """Tree-interior coordinator; leaf Agents and child RMs look identical
    to it because both speak the same pull protocol.
    """

    def __init__(
        self,
        node_id: str,
        region: str = "",
        poll_interval: float = 1.0,
        liveness_misses: int = 10,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.node_id = node_id
        self.region = region
        self.poll_interval = poll_interval
        self.liveness_misses = liveness_misses
        self._clock = clock
        self._lock = threading.RLock()
        self._children: dict[str, NodeInfo] = {}
        self._runs: dict[str, _ReleaseRun] = {}
        self._run_order: list[str] = []
        self._last_poll: dict[str, float] = {}
        self.transcript: list[TransitionRecord] = []
        self.capabilities_listener: Callable[[], None] | None = None
        # Set when this manager itself reports to a parent; adopted runs then
        # gate phase advancement and end signals on the parent's say-so.
        self.parent_linked = False

    # -- children & capabilities ------------------------------------------------

    def register_child(self, info: NodeInfo) -> None:
        """Track a child; re-registration by the same node updates its
        capability report (that is how updates propagate up the tree)."""
        with self._lock:
            existing = self._children.get(info.node_id)
            if existing is not None and (existing.kind != info.kind or existing.region != info.region):
                raise DuplicateNode(f"{info.node_id!r} already registered as {existing.kind}/{existing.region}")
            self._children[info.node_id] = info
            self._last_poll.setdefault(info.node_id, self._clock())
        if self.capabilities_listener is not None:
            self.capabilities_listener()

    @property
    def children(self) -> dict[str, NodeInfo]:
        with self._lock:
            return dict(self._children)

    @property
    def capabilities(self) -> Capabilities:
        with self._lock:
            return Capabilities.union(info.capabilities for info in self._children.values())

    def node_info(self, parent_address: str | None = None) -> NodeInfo:
        return NodeInfo(
            node_id=self.node_id,
            kind="rm",
            region=self.region,
            capabilities=self.capabilities,
            parent_address=parent_address,
        )

    # -- transitions (recorded) ---------------------------------------------------

    def _record(self, entity: str, node: str, subject: str, frm: str, event: str, to: str) -> None:
        self.transcript.append(TransitionRecord(entity, node, subject, frm, event, to))

    def _release_event(self, run: _ReleaseRun, led: _ChildLedger, event: ReleaseEvent) -> None:
        frm = led.status
        led.status = transition_release(frm, event)
        self._record("release", led.node_id, run.release_id, frm.value, event.value, led.status.value)

    def _stage_event(self, run: _ReleaseRun, led: _ChildLedger, idx: int, event: StageEvent) -> None:
        frm = led.stage_status[idx]
        led.stage_status[idx] = transition_stage(frm, event)
        self._record(
            "stage", led.node_id, led.stage_names[idx], frm.value, event.value, led.stage_status[idx].value
        )

    # -- submission ------------------------------------------------------------------

    def submit_release(
        self,
        strategy: ReleaseStrategy,
        release_id: str | None = None,
        adopted: bool = False,
    ) -> str:
        with self._lock:
            rid = release_id or f"r-{uuid.uuid4().hex[:10]}"
            if rid in self._runs:
                raise WrongState(f"release {rid!r} already submitted")

            areas = self._child_areas(strategy)
            covered = {loc.region for area in areas for loc in area.locations}
            required: set[str] = set(strategy.geo_scope or ())
            for stage in strategy.stages:
                if stage.regions:
                    required.update(stage.regions)
            missing = sorted(r for r in required if r not in covered)
            if missing or not covered:
                raise InsufficientCapabilities(missing or sorted(required))

            plan, promote = self._build_plan(strategy, areas)
            docs = derive_child_strategies(strategy, plan, areas, promote_final_step=promote)
            phases = self._build_phases(strategy, plan, areas, docs, promote)

            run = _ReleaseRun(
                release_id=rid,
                strategy=strategy,
                plan=plan,
                phases=phases,
                child_docs={node: strategy_to_dict(doc) for node, doc in docs.items()},
                children={},
                adopted=adopted,
            )
            for node in self._children:
                led = _ChildLedger(node_id=node)
                led.stage_names = [p.name for p in phases if node in p.participants]
                led.stage_status = [StageStatus.PENDING] * len(led.stage_names)
                run.children[node] = led
            self._runs[rid] = run
            self._run_order.append(rid)
            for node, led in run.children.items():
                if led.stage_names:
                    self._release_event(run, led, ReleaseEvent.MARK_TODO)
            return rid

    def _child_areas(self, strategy: ReleaseStrategy) -> list[ChildArea]:
        scope = strategy.geo_scope
        areas: list[ChildArea] = []
        for node_id in sorted(self._children):
            info = self._children[node_id]
            locations = tuple(
                loc for loc in info.capabilities.locations
                if scope is None or loc.region in scope
            )
            if locations:
                areas.append(ChildArea(node_id=node_id, kind=info.kind, locations=locations))
        return areas

    def _build_plan(
        self, strategy: ReleaseStrategy, areas: list[ChildArea]
    ) -> tuple[RolloutPlan | None, bool]:
        span = find_rollout_segment(strategy)
        if span is None:
            return None, False
        segment = strategy.stages[span[0]:span[1]]
        ladder = [s.traffic_new_percent for s in segment]
        promote = ladder[-1] != 100.0
        if promote:
            ladder.append(100.0)
        locations = sorted(
            (loc for area in areas for loc in area.locations),
            key=lambda l: l.node_id,
        )
        plan = plan_for(strategy.rollout_kind, locations, ladder, strategy.rollout_region)
        return plan, promote

    def _build_phases(
        self,
        strategy: ReleaseStrategy,
        plan: RolloutPlan | None,
        areas: list[ChildArea],
        docs: Mapping[str, ReleaseStrategy],
        promote: bool,
    ) -> list[_Phase]:
        span = find_rollout_segment(strategy) if plan is not None else None
        phases: list[_Phase] = []

        def participants_for(stage) -> tuple[str, ...]:
            return tuple(a.node_id for a in areas if stage_applies(stage, a) and a.node_id in docs)

        for i, stage in enumerate(strategy.stages):
            if span is not None and span[0] <= i < span[1]:
                if i != span[0]:
                    continue
                segment_last = strategy.stages[span[1] - 1]
                last = len(plan.steps) - 1
                previous: dict[str, float] = {}
                for k, step in enumerate(plan.steps):
                    names: list[str] = []
                    for area in areas:
                        if area.node_id not in docs:
                            continue
                        changed = any(
                            float(step.get(loc.node_id, previous.get(loc.node_id, 0.0)))
                            != previous.get(loc.node_id, 0.0)
                            for loc in area.locations
                        )
                        promo_here = promote and k == last and any(
                            float(step.get(loc.node_id, 0.0)) == 100.0 for loc in area.locations
                        )
                        if changed or promo_here:
                            names.append(area.node_id)
                    for loc_id, pct in step.items():
                        previous[loc_id] = float(pct)
                    if names:
                        is_promo = promote and k == last
                        ends = is_promo or (
                            k == last and segment_last.on_success is not StageAction.NEXT_STAGE
                        )
                        phases.append(
                            _Phase(
                                index=len(phases),
                                name=rollout_stage_name(k),
                                participants=tuple(names),
                                wait_for_signal=True,
                                auto_end=True,
                                promotion=is_promo,
                                ends_on_success=ends,
                            )
                        )
            else:
                names = participants_for(stage)
                if names:
                    phases.append(
                        _Phase(
                            index=len(phases),
                            name=stage.name,
                            participants=names,
                            wait_for_signal=stage.stage_type is StageType.WAIT_FOR_SIGNAL,
                            auto_end=stage.auto_end,
                            promotion=stage.promotion,
                            ends_on_success=stage.on_success is not StageAction.NEXT_STAGE,
                        )
                    )
        seen: set[str] = set()
        for phase in phases:
            if phase.name in seen:
                raise ValidationError("stages", f"phase name collision on {phase.name!r}")
            seen.add(phase.name)
        return phases

    # -- protocol: poll --------------------------------------------------------------

    def handle_poll(self, node_id: str) -> PollReply:
        with self._lock:
            if node_id not in self._children:
                raise UnknownNode(node_id)
            self._last_poll[node_id] = self._clock()
            self._sweep_locked()
            run = self._active_run_for(node_id)
            if run is None:
                return PollReply(status=ReleaseStatus.NO)
            led = run.children[node_id]
            reply = PollReply(status=led.status, release_id=run.release_id)
            if led.status is not ReleaseStatus.DOING:
                return reply

            idx = led.current_index()
            if idx is None:
                return reply
            if run.aborting:
                if led.stage_status[idx] in (
                    StageStatus.IN_PROGRESS,
                    StageStatus.WAIT_FOR_SIGNAL,
                    StageStatus.SHOULD_END,
                ):
                    reply.abort = True
                return reply

            phase = run.phase_named(led.stage_names[idx])
            if (
                led.stage_status[idx] is StageStatus.PENDING
                and phase is not None
                and phase.index == run.phase_idx
            ):
                self._stage_event(run, led, idx, StageEvent.START)
            if led.stage_status[idx] is StageStatus.IN_PROGRESS:
                reply.start_stage = led.stage_names[idx]
            elif led.stage_status[idx] is StageStatus.WAIT_FOR_SIGNAL and self._gate_open(run, phase):
                self._stage_event(run, led, idx, StageEvent.PARENT_SIGNAL)
                reply.end_stage = led.stage_names[idx]
            elif led.stage_status[idx] is StageStatus.SHOULD_END:
                reply.end_stage = led.stage_names[idx]
            return reply

    def _active_run_for(self, node_id: str) -> _ReleaseRun | None:
        for rid in self._run_order:
            run = self._runs[rid]
            led = run.children.get(node_id)
            if led is None or not led.stage_names:
                continue
            if led.status is ReleaseStatus.DOING:
                return run
            if led.status is ReleaseStatus.TODO and run.overall == "running":
                return run
        return None

    # -- protocol: fetch ----------------------------------------------------------

    def handle_release_fetch(self, node_id: str, release_id: str) -> dict[str, Any]:
        with self._lock:
            if node_id not in self._children:
                raise UnknownNode(node_id)
            run = self._runs.get(release_id)
            if run is None:
                raise UnknownRelease(release_id)
            led = run.children.get(node_id)
            if led is None or node_id not in run.child_docs:
                raise WrongState(f"{node_id!r} is not involved in {release_id!r}")
            if led.status is not ReleaseStatus.TODO:
                raise WrongState(f"fetch requires Todo, child is {led.status.value}")
            self._release_event(run, led, ReleaseEvent.CHILD_FETCHED)
            phase = run.phase_named(led.stage_names[0]) if led.stage_names else None
            if phase is not None and phase.index == run.phase_idx:
                self._stage_event(run, led, 0, StageEvent.START)
            return run.child_docs[node_id]

    # -- protocol: end-stage gate ---------------------------------------------------

    def _phase_participants_pending(self, run: _ReleaseRun, phase: _Phase) -> bool:
        """True while some participant still has to reach its end conditions.

        Participants whose release already ended (early end action, abort)
        are no longer expected to move."""
        for node in phase.participants:
            led = run.children[node]
            if led.status in (ReleaseStatus.DONE, ReleaseStatus.FAILED):
                continue
            idx = led.index_of(phase.name)
            if idx is None:
                continue
            if led.stage_status[idx] in (StageStatus.PENDING, StageStatus.IN_PROGRESS):
                return True
        return False

    def _gate_open(self, run: _ReleaseRun, phase: _Phase | None) -> bool:
        if phase is None or run.aborting:
            return False
        if not phase.auto_end:
            if phase.name in run.manual_end:
                return True
            # In a deeper tree the operator signals the root; the gate
            # arrives here through our own parent.
            return run.adopted and self.parent_linked and phase.name in run.parent_gate
        if self._phase_participants_pending(run, phase):
            return False
        if run.adopted and self.parent_linked:
            return phase.name in run.parent_gate
        return True

    def handle_end_stage(self, node_id: str, release_id: str, stage_name: str) -> bool:
        """Child-side poll for a termination signal.

        The first call also tells this manager the child's end conditions
        are met (its stage moves to WaitForSignal).
        """
        with self._lock:
            if node_id not in self._children:
                raise UnknownNode(node_id)
            self._last_poll[node_id] = self._clock()
            run = self._runs.get(release_id)
            if run is None:
                raise UnknownRelease(release_id)
            led = run.children.get(node_id)
            if led is None:
                raise WrongState(f"{node_id!r} is not involved in {release_id!r}")
            idx = led.index_of(stage_name)
            if idx is None:
                raise NotWaiting(f"no stage {stage_name!r} for {node_id!r}")
            if run.aborting:
                # Terminating early is the point; let the child end and report.
                if led.stage_status[idx] is StageStatus.IN_PROGRESS:
                    self._stage_event(run, led, idx, StageEvent.END_CONDITIONS_MET)
                if led.stage_status[idx] is StageStatus.WAIT_FOR_SIGNAL:
                    self._stage_event(run, led, idx, StageEvent.PARENT_SIGNAL)
                return True
            if led.stage_status[idx] is StageStatus.IN_PROGRESS:
                self._stage_event(run, led, idx, StageEvent.END_CONDITIONS_MET)
            if led.stage_status[idx] is StageStatus.SHOULD_END:
                return True
            if led.stage_status[idx] is not StageStatus.WAIT_FOR_SIGNAL:
                raise NotWaiting(f"stage {stage_name!r} is {led.stage_status[idx].value}")
            phase = run.phase_named(stage_name)
            if self._gate_open(run, phase):
                self._stage_event(run, led, idx, StageEvent.PARENT_SIGNAL)
                return True
            return False

    def signal_end(self, release_id: str, stage_name: str) -> None:
        """Operator-initiated termination of a WaitForSignal stage."""
        with self._lock:
            run = self._runs.get(release_id)
            if run is None:
                raise UnknownRelease(release_id)
            phase = run.phase_named(stage_name)
            if phase is None or not phase.wait_for_signal or phase.auto_end:
                raise NotWaiting(f"{stage_name!r} is not a signal-terminated stage")
            if phase.index != run.phase_idx or run.overall != "running":
                raise NotWaiting(f"{stage_name!r} is not active")
            run.manual_end.add(stage_name)

    # -- protocol: results ------------------------------------------------------------

    def handle_result(self, node_id: str, release_id: str, result: StageResult) -> None:
        with self._lock:
            if node_id not in self._children:
                raise UnknownNode(node_id)
            self._last_poll[node_id] = self._clock()
            run = self._runs.get(release_id)
            if run is None:
                raise UnknownRelease(release_id)
            led = run.children.get(node_id)
            if led is None:
                raise WrongState(f"{node_id!r} is not involved in {release_id!r}")
            if led.status is not ReleaseStatus.DOING:
                raise WrongState(f"result requires Doing, child is {led.status.value}")
            idx = led.current_index()
            if idx is None or led.stage_names[idx] != result.stage_name:
                raise OutOfOrderResult(
                    f"expected result for {led.stage_names[idx] if idx is not None else 'nothing'}, "
                    f"got {result.stage_name!r}"
                )
            if result.status not in TERMINAL_STAGE_STATUSES:
                raise OutOfOrderResult(f"result status {result.status.value} is not terminal")
            status = led.stage_status[idx]
            if status is StageStatus.PENDING:
                raise OutOfOrderResult(f"stage {result.stage_name!r} was never started")
            if status is StageStatus.WAIT_FOR_SIGNAL:
                # The child ended while waiting (error or abort); permit the
                # exit so the ledger follows the legal path.
                self._stage_event(run, led, idx, StageEvent.PARENT_SIGNAL)
            event = {
                StageStatus.COMPLETED: StageEvent.SUCCEED,
                StageStatus.FAILURE: StageEvent.FAIL,
                StageStatus.ERROR: StageEvent.ABORT,
            }[result.status]
            self._stage_event(run, led, idx, event)
            led.results[result.stage_name] = result

            if result.status is StageStatus.COMPLETED:
                phase = run.phase_named(result.stage_name)
                ends = idx == len(led.stage_names) - 1 or (
                    phase is not None and phase.ends_on_success
                )
                if ends:
                    self._release_event(run, led, ReleaseEvent.ALL_STAGES_COMPLETED)
            else:
                self._release_event(run, led, ReleaseEvent.ANY_STAGE_FAILED)
                self._trigger_abort(run)

            self._phase_bookkeeping(run)
            self._update_overall(run)

    def _trigger_abort(self, run: _ReleaseRun) -> None:
        if not run.aborting:
            run.aborting = True
        for led in run.children.values():
            if led.status is not ReleaseStatus.DOING:
                continue
            idx = led.current_index()
            if idx is None:
                continue
            if led.stage_status[idx] is StageStatus.PENDING:
                # Nothing in flight to wait for; the release fails outright.
                self._release_event(run, led, ReleaseEvent.ANY_STAGE_FAILED)

    def _phase_bookkeeping(self, run: _ReleaseRun) -> None:
        while run.phase_idx < len(run.phases):
            phase = run.phases[run.phase_idx]
            statuses = []
            for node in phase.participants:
                led = run.children[node]
                if led.status in (ReleaseStatus.DONE, ReleaseStatus.FAILED):
                    continue  # ended early; nothing more expected from it
                idx = led.index_of(phase.name)
                statuses.append(led.stage_status[idx] if idx is not None else StageStatus.ERROR)
            if not all(s in TERMINAL_STAGE_STATUSES for s in statuses):
                break
            if phase.name not in run.phase_reported:
                run.phase_reported.add(phase.name)
                results = [
                    run.children[node].results[phase.name]
                    for node in phase.participants
                    if phase.name in run.children[node].results
                ]
                if results:
                    merged = merge_results(phase.name, results)
                    run.upward_queue.append(merged)
            if run.aborting:
                break
            nxt = run.phase_idx + 1
            if nxt < len(run.phases) and run.adopted and self.parent_linked:
                if run.phases[nxt].name not in run.parent_permit:
                    break
            run.phase_idx = nxt

    def _update_overall(self, run: _ReleaseRun) -> None:
        involved = [led for led in run.children.values() if led.stage_names]
        if any(led.status is ReleaseStatus.FAILED for led in involved):
            run.overall = "failed"
        elif all(led.status is ReleaseStatus.DONE for led in involved):
            run.overall = "done"

    # -- liveness -------------------------------------------------------------------

    def sweep(self) -> None:
        with self._lock:
            self._sweep_locked()

    def _sweep_locked(self) -> None:
        deadline = self.liveness_misses * self.poll_interval
        now = self._clock()
        for rid in self._run_order:
            run = self._runs[rid]
            if run.overall != "running":
                continue
            for led in run.children.values():
                if led.status is not ReleaseStatus.DOING:
                    continue
                idx = led.current_index()
                if idx is None:
                    continue
                if led.stage_status[idx] not in (
                    StageStatus.IN_PROGRESS,
                    StageStatus.WAIT_FOR_SIGNAL,
                    StageStatus.SHOULD_END,
                ):
                    continue
                if now - self._last_poll.get(led.node_id, now) <= deadline:
                    continue
                # Child dropped off mid-stage: mark the stage errored.
                if led.stage_status[idx] is StageStatus.WAIT_FOR_SIGNAL:
                    self._stage_event(run, led, idx, StageEvent.PARENT_SIGNAL)
                self._stage_event(run, led, idx, StageEvent.ABORT)
                led.results[led.stage_names[idx]] = StageResult(
                    stage_name=led.stage_names[idx],
                    status=StageStatus.ERROR,
                    summary=MetricsSummary(),
                    node_id=led.node_id,
                    detail="liveness timeout",
                )
                self._release_event(run, led, ReleaseEvent.ANY_STAGE_FAILED)
                self._trigger_abort(run)
                self._phase_bookkeeping(run)
                self._update_overall(run)

    # -- driver hooks (this RM acting as a child of its own parent) ---------------

    def permit_stage(self, release_id: str, stage_name: str) -> None:
        with self._lock:
            run = self._runs.get(release_id)
            if run is None:
                return
            run.parent_permit.add(stage_name)
            self._phase_bookkeeping(run)

    def set_parent_gate(self, release_id: str, stage_name: str) -> None:
        with self._lock:
            run = self._runs.get(release_id)
            if run is None:
                return
            run.parent_gate.add(stage_name)

    def abort_release(self, release_id: str) -> None:
        with self._lock:
            run = self._runs.get(release_id)
            if run is None:
                return
            self._trigger_abort(run)
            self._update_overall(run)

    def waiting_phase(self, release_id: str) -> str | None:
        """Name of the current signal-terminated phase once every participant
        has met its end conditions; the child driver forwards this upward."""
        with self._lock:
            run = self._runs.get(release_id)
            if run is None or run.phase_idx >= len(run.phases):
                return None
            phase = run.phases[run.phase_idx]
            if not (phase.auto_end or phase.wait_for_signal):
                return None
            if self._phase_participants_pending(run, phase):
                return None
            return phase.name

    def pop_upward_results(self, release_id: str) -> list[StageResult]:
        with self._lock:
            run = self._runs.get(release_id)
            if run is None:
                return []
            out = list(run.upward_queue)
            run.upward_queue.clear()
            return out

    def requeue_upward_results(self, release_id: str, results: list[StageResult]) -> None:
        """Put undelivered results back at the front, preserving order."""
        with self._lock:
            run = self._runs.get(release_id)
            if run is None:
                return
            run.upward_queue[:0] = results

    # -- introspection -----------------------------------------------------------------

    def release_overview(self, release_id: str) -> dict[str, Any]:
        with self._lock:
            run = self._runs.get(release_id)
            if run is None:
                raise UnknownRelease(release_id)
            self._sweep_locked()
            children = {}
            for node, led in run.children.items():
                if not led.stage_names:
                    children[node] = {"status": led.status.value, "stages": {}}
                    continue
                children[node] = {
                    "status": led.status.value,
                    "stages": {
                        name: status.value
                        for name, status in zip(led.stage_names, led.stage_status)
                    },
                }
            return {
                "release": run.release_id,
                "overall": run.overall,
                "phase": run.phases[run.phase_idx].name if run.phase_idx < len(run.phases) else None,
                "children": children,
                "plan": run.plan.to_json() if run.plan is not None else None,
            }

    def release_ids(self) -> list[str]:
        with self._lock:
            return list(self._run_order)
