"""Leaf node: executes a received release strategy against its local FaaS
platform. Deploys both variants at side endpoints, installs or reconfigures
the proxy at the public endpoint, collects telemetry until the stage may be
evaluated, applies the stage's success/failure action, and reports to the
parent.

One release executes at a time; stages are strictly sequential. Telemetry
ingestion is concurrent with execution (proxy threads append, the stage
loop reads).
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .backend import FaasPlatform, MockPlatform
from .errors import (
    CanarytreeError,
    DeployFailed,
    RegistrationFailed,
    Unavailable,
    Unreachable,
)
from .manager import Capabilities, NodeInfo, PollReply, ReleaseManager
from .metrics import (
    StageResult,
    aggregate,
    all_passed,
    evaluate_conditions,
)
from .planner import LocationInfo
from .proxy import ProxyFunction
from .routing import RoutingConfig, fnv1a_64
from .strategy import (
    FunctionRef,
    ReleaseStatus,
    ReleaseStrategy,
    Stage,
    StageAction,
    StageStatus,
    StageType,
    strategy_from_dict,
)
from .telemetry import CallRecord, InProcessSink, RecordCollector, TelemetryEmitter


class ParentLink(Protocol):
    """Client side of the pull protocol; HTTP and in-process variants."""

    def register(self, info: NodeInfo) -> None: ...
    def poll(self, node_id: str) -> PollReply: ...
    def fetch(self, node_id: str, release_id: str) -> dict[str, Any]: ...
    def post_result(self, node_id: str, release_id: str, result: StageResult) -> None: ...
    def end_stage(self, node_id: str, release_id: str, stage_name: str) -> bool: ...


class InProcessParent:
    """Direct binding to a manager living in the same process."""

    def __init__(self, manager: ReleaseManager) -> None:
        self._manager = manager

    def register(self, info: NodeInfo) -> None:
        self._manager.register_child(info)

    def poll(self, node_id: str) -> PollReply:
        return self._manager.handle_poll(node_id)

    def fetch(self, node_id: str, release_id: str) -> dict[str, Any]:
        return self._manager.handle_release_fetch(node_id, release_id)

    def post_result(self, node_id: str, release_id: str, result: StageResult) -> None:
        self._manager.handle_result(node_id, release_id, result)

    def end_stage(self, node_id: str, release_id: str, stage_name: str) -> bool:
        return self._manager.handle_end_stage(node_id, release_id, stage_name)


class StageRun:
    """Mutable state of one executing stage; one writer pool, one reader."""

    def __init__(self, stage: Stage, started_at: float) -> None:
        self.stage = stage
        self.status = StageStatus.IN_PROGRESS
        self.started_at = started_at
        self._lock = threading.Lock()
        self._records: list[CallRecord] = []
        self.losses = 0
        self.discarded_late = 0

    def add(self, record: CallRecord) -> None:
        with self._lock:
            self._records.append(record)

    def served_count(self) -> int:
        with self._lock:
            return sum(1 for r in self._records if not r.mirror)

    def snapshot(self) -> list[CallRecord]:
        with self._lock:
            return list(self._records)


def end_conditions_met(run: StageRun, now: float) -> bool:
    """True once BOTH thresholds hold: served calls and elapsed time.

    Mirror-origin records never count toward the call minimum.
    """
    conditions = run.stage.end_conditions
    if run.served_count() < conditions.min_calls:
        return False
    return (now - run.started_at) >= conditions.min_duration_s


@dataclass
class _ReleaseOutcome:
    status: ReleaseStatus
    results: list[StageResult] = field(default_factory=list)


class Agent:
    def __init__(
        self,
        node_id: str,
        region: str,
        platform: FaasPlatform,
        parent: ParentLink,
        poll_interval: float = 1.0,
        check_interval: float = 1.0,
        seed: int = 0,
        proxy_overhead_ms: float = 2.0,
        results_log: Path | str | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.node_id = node_id
        self.region = region
        self.platform = platform
        self.parent = parent
        self.poll_interval = poll_interval
        self.check_interval = check_interval
        self.seed = seed
        self.proxy_overhead_ms = proxy_overhead_ms
        self.results_log = Path(results_log) if results_log is not None else None
        self._clock = clock
        self._log_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._run_lock = threading.Lock()
        self._active_run: StageRun | None = None
        self._proxies: dict[str, ProxyFunction] = {}
        self.discarded_total = 0
        self.collector = RecordCollector(self._on_record)
        self.sink = InProcessSink(self.collector)
        self.outcomes: dict[str, _ReleaseOutcome] = {}

    # -- identity ------------------------------------------------------------------

    def node_info(self) -> NodeInfo:
        location = LocationInfo(
            node_id=self.node_id, region=self.region, platform_kind=self.platform.platform_kind
        )
        return NodeInfo(
            node_id=self.node_id,
            kind="agent",
            region=self.region,
            capabilities=Capabilities(
                platform_kinds=frozenset({self.platform.platform_kind}),
                locations=(location,),
            ),
        )

    # -- lifecycle ------------------------------------------------------------------

    def start(self) -> None:
        try:
            self.parent.register(self.node_info())
        except Exception as exc:
            raise RegistrationFailed(str(exc)) from exc
        self._thread = threading.Thread(target=self._poll_loop, name=f"agent-{self.node_id}", daemon=True)
        self._thread.start()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)
        for proxy in self._proxies.values():
            proxy.close()

    def _poll_loop(self) -> None:
        while not self._stop.is_set():
            try:
                reply = self.parent.poll(self.node_id)
            except Exception:
                self._stop.wait(self.poll_interval)
                continue
            if reply.status is ReleaseStatus.TODO and reply.release_id:
                try:
                    doc = self.parent.fetch(self.node_id, reply.release_id)
                    strategy = strategy_from_dict(doc)
                except Exception:
                    self._stop.wait(self.poll_interval)
                    continue
                outcome = self.run_release(strategy, reply.release_id)
                self.outcomes[reply.release_id] = outcome
            self._stop.wait(self.poll_interval)

    # -- telemetry ingestion ---------------------------------------------------------

    def _on_record(self, record: CallRecord) -> None:
        with self._run_lock:
            run = self._active_run
            if run is not None and record.stage == run.stage.name:
                run.add(record)
            else:
                self.discarded_total += 1
                if run is not None:
                    run.discarded_late += 1

    def _set_active(self, run: StageRun | None) -> None:
        with self._run_lock:
            self._active_run = run

    # -- release execution -------------------------------------------------------------

    def run_release(self, strategy: ReleaseStrategy, release_id: str) -> _ReleaseOutcome:
        """Execute stages in order; the per-stage action decides continuation."""
        outcome = _ReleaseOutcome(status=ReleaseStatus.DOING)
        for stage in strategy.stages:
            go = self._await_start(stage, release_id)
            if go == "abort":
                self._restore_rollback(strategy)
                outcome.status = ReleaseStatus.FAILED
                return outcome
            if go == "over":
                outcome.status = ReleaseStatus.FAILED
                return outcome
            result = self.execute_stage(stage, strategy, release_id)
            outcome.results.append(result)
            self._post_result(release_id, result)
            if result.status is not StageStatus.COMPLETED:
                # The parent treats any Failure/Error as a failed release;
                # the failure action already ran against the endpoints.
                outcome.status = ReleaseStatus.FAILED
                return outcome
            if stage.on_success is not StageAction.NEXT_STAGE:
                break
        outcome.status = ReleaseStatus.DONE
        return outcome

    def _await_start(self, stage: Stage, release_id: str) -> str:
        """Block until the parent grants this stage; 'go' | 'abort' | 'over'."""
        while not self._stop.is_set():
            try:
                reply = self.parent.poll(self.node_id)
            except Exception:
                self._stop.wait(self.poll_interval)
                continue
            if reply.release_id == release_id:
                if reply.abort:
                    return "abort"
                if reply.status in (ReleaseStatus.FAILED, ReleaseStatus.DONE):
                    return "over"
                if reply.start_stage == stage.name:
                    return "go"
            elif reply.status is not ReleaseStatus.DOING:
                return "over"
            self._stop.wait(self.poll_interval)
        return "over"

    def _post_result(self, release_id: str, result: StageResult) -> None:
        for _ in range(3):
            try:
                self.parent.post_result(self.node_id, release_id, result)
                return
            except CanarytreeError:
                return  # protocol rejection; retrying will not help
            except Exception:
                time.sleep(min(self.poll_interval, 0.5))

    # -- stage execution ------------------------------------------------------------------

    def execute_stage(self, stage: Stage, strategy: ReleaseStrategy, release_id: str) -> StageResult:
        started = self._clock()
        try:
            base_ep, new_ep = self._ensure_variants(stage, strategy)
            self._ensure_proxy(stage, base_ep, new_ep)
        except (DeployFailed, Unreachable, Unavailable) as exc:
            return StageResult(
                stage_name=stage.name,
                status=StageStatus.ERROR,
                summary=aggregate([]),
                started_ts=started,
                ended_ts=self._clock(),
                node_id=self.node_id,
                detail=f"deployment failed: {exc}",
            )

        self._log_marker("start", release_id, stage.name)
        run = StageRun(stage, started_at=self._clock())
        losses_before = self.collector.reported_losses
        self._set_active(run)

        verdict = "run"
        waiting = False
        infra_detail = ""
        last_poll = 0.0
        while not self._stop.is_set():
            self._stop.wait(self.check_interval)
            now = self._clock()
            infra_detail = self._backend_fault(stage.function)
            if infra_detail:
                verdict = "infra"
                break
            if now - last_poll >= self.poll_interval:
                last_poll = now
                abort = self._poll_for_abort(release_id)
                if abort:
                    verdict = "abort"
                    break
            if not end_conditions_met(run, now):
                continue
            if stage.stage_type is StageType.SEQUENTIAL:
                verdict = "evaluate"
                break
            waiting = True
            try:
                if self.parent.end_stage(self.node_id, release_id, stage.name):
                    verdict = "evaluate"
                    break
            except CanarytreeError:
                verdict = "abort"
                break
            except Exception:
                continue

        self._set_active(None)
        records = run.snapshot()
        run.losses = self.collector.reported_losses - losses_before
        ended = self._clock()
        summary = aggregate(records)

        if verdict in ("abort", "infra"):
            detail = infra_detail if verdict == "infra" else (
                "aborted by parent" + (" while waiting" if waiting else "")
            )
            result = StageResult(
                stage_name=stage.name,
                status=StageStatus.ERROR,
                summary=summary,
                started_ts=run.started_at,
                ended_ts=ended,
                node_id=self.node_id,
                losses=run.losses,
                discarded_late=run.discarded_late,
                detail=detail,
            )
            self._apply_action(StageAction.ROLLBACK, stage, strategy)
        else:
            outcomes = evaluate_conditions(summary, stage.metric_conditions, stage.base, stage.new)
            passed = all_passed(outcomes)
            status = StageStatus.COMPLETED if passed else StageStatus.FAILURE
            result = StageResult(
                stage_name=stage.name,
                status=status,
                summary=summary,
                outcomes=tuple(outcomes),
                started_ts=run.started_at,
                ended_ts=ended,
                node_id=self.node_id,
                losses=run.losses,
                discarded_late=run.discarded_late,
            )
            action = stage.on_success if passed else stage.on_failure
            if action is not StageAction.NEXT_STAGE:
                self._apply_action(action, stage, strategy)

        self._log_marker("end", release_id, stage.name, status=result.status.value)
        self._log_result(release_id, result)
        return result

    def _backend_fault(self, function: str) -> str:
        """Infrastructure fault detection, distinct from test failure."""
        ping = getattr(self.platform, "ping", None)
        if ping is not None:
            try:
                ping()
            except (Unreachable, Unavailable) as exc:
                return f"backend unreachable: {exc}"
        serving = getattr(self.platform, "serving", None)
        if serving is not None and serving(function) is None:
            return "public endpoint disappeared mid-stage"
        return ""

    def _poll_for_abort(self, release_id: str) -> bool:
        try:
            reply = self.parent.poll(self.node_id)
        except Exception:
            return False
        if reply.release_id != release_id:
            return False
        return reply.abort or reply.status is ReleaseStatus.FAILED

    # -- endpoint management -------------------------------------------------------------

    def _side_ref(self, strategy: ReleaseStrategy, function: str, version: str) -> FunctionRef:
        declared = strategy.function_for(function, version)
        return FunctionRef(
            name=f"{function}--{version}",
            version=version,
            artifact=declared.artifact,
            runtime=declared.runtime,
        )

    def _public_ref(self, strategy: ReleaseStrategy, function: str, version: str) -> FunctionRef:
        declared = strategy.function_for(function, version)
        return FunctionRef(
            name=function, version=version, artifact=declared.artifact, runtime=declared.runtime
        )

    def _ensure_variants(self, stage: Stage, strategy: ReleaseStrategy):
        base_ep = self.platform.deploy(self._side_ref(strategy, stage.function, stage.base))
        new_ep = self.platform.deploy(self._side_ref(strategy, stage.function, stage.new))
        return base_ep, new_ep

    def _ensure_proxy(self, stage: Stage, base_ep, new_ep) -> None:
        config = RoutingConfig(
            method=stage.routing,
            traffic_new_percent=stage.traffic_new_percent,
            base_label=stage.base,
            new_label=stage.new,
            mirror=stage.mirror,
            seed=(self.seed * 0x9E3779B1 + fnv1a_64(stage.name.encode())) & 0x7FFFFFFF,
        )
        proxy = self._proxies.get(stage.function)
        if proxy is None:
            emitter = TelemetryEmitter(self.sink, emitter_id=f"{self.node_id}:{stage.function}")
            proxy = ProxyFunction(
                self.platform, stage.function, emitter, overhead_ms=self.proxy_overhead_ms
            )
            proxy.configure(stage.name, config, base_ep, new_ep)
            if not isinstance(self.platform, MockPlatform):
                raise DeployFailed("only the mock platform can host the in-process proxy")
            self.platform.deploy_handler(stage.function, proxy, serving="proxy")
            self._proxies[stage.function] = proxy
        else:
            proxy.configure(stage.name, config, base_ep, new_ep)

    def _drop_proxy(self, function: str) -> None:
        proxy = self._proxies.pop(function, None)
        if proxy is not None:
            proxy.close()

    def _apply_action(self, action: StageAction, stage: Stage, strategy: ReleaseStrategy) -> None:
        public = stage.function
        if action is StageAction.ROLLBACK:
            target = self._public_ref(strategy, strategy.rollback.name, strategy.rollback.version)
        elif action is StageAction.ROLLOUT:
            target = self._public_ref(strategy, stage.function, stage.new)
        elif action is StageAction.END:
            target = self._public_ref(strategy, stage.function, stage.base)
        else:
            return
        try:
            self.platform.replace(public, target)
        except (DeployFailed, Unreachable):
            return
        finally:
            self._drop_proxy(public)

    def _restore_rollback(self, strategy: ReleaseStrategy) -> None:
        """Convergence after a sibling abort: serve the rollback version."""
        name = strategy.rollback.name
        if name in self._proxies:
            try:
                self.platform.replace(name, self._public_ref(strategy, name, strategy.rollback.version))
            except (DeployFailed, Unreachable):
                pass
            self._drop_proxy(name)

    # -- results log -------------------------------------------------------------------

    def _log_line(self, payload: dict[str, Any]) -> None:
        if self.results_log is None:
            return
        with self._log_lock:
            with self.results_log.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(payload, separators=(",", ":")) + "\n")

    def _log_marker(self, kind: str, release_id: str, stage_name: str, status: str = "") -> None:
        self._log_line(
            {
                "type": "marker",
                "kind": kind,
                "node": self.node_id,
                "release": release_id,
                "stage": stage_name,
                "status": status,
                "ts_ms": self._clock() * 1000.0,
            }
        )

    def _log_result(self, release_id: str, result: StageResult) -> None:
        self._log_line({"type": "result", "release": release_id, **result.to_dict()})
