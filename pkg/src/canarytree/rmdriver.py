"""Bridge that lets a release manager act as a child of another manager.

The driver runs the same pull loop an agent runs: poll, fetch, execute,
report. "Execute" here means re-submitting the received strategy to the
local manager, which re-plans it for its own children. Phase completions
are aggregated and posted upward under the same deterministic stage names
the parent derived, and end-signal gates are chained: this manager only
releases its children from a synchronization stage once its own parent has
released it.
"""

from __future__ import annotations

import threading
from typing import TYPE_CHECKING

from .manager import NodeInfo, ReleaseManager
from .strategy import ReleaseStatus, strategy_from_dict

if TYPE_CHECKING:
    from .agent import ParentLink


class RmChildDriver:
    def __init__(self, manager: ReleaseManager, parent: "ParentLink") -> None:
        self.manager = manager
        self.parent = parent
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._adopted: set[str] = set()
        manager.parent_linked = True
        manager.capabilities_listener = self._report_capabilities

    def node_info(self) -> NodeInfo:
        return self.manager.node_info()

    def start(self) -> None:
        self.parent.register(self.node_info())
        self._thread = threading.Thread(
            target=self._loop, name=f"rmchild-{self.manager.node_id}", daemon=True
        )
        self._thread.start()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)

    def _report_capabilities(self) -> None:
        # Re-registration carries the updated capability union upward.
        try:
            self.parent.register(self.node_info())
        except Exception:
            pass

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                self._tick()
            except Exception:
                pass
            self._stop.wait(self.manager.poll_interval)

    def _tick(self) -> None:
        node = self.manager.node_id
        reply = self.parent.poll(node)
        rid = reply.release_id

        if reply.status is ReleaseStatus.TODO and rid:
            doc = self.parent.fetch(node, rid)
            strategy = strategy_from_dict(doc)
            self.manager.submit_release(strategy, release_id=rid, adopted=True)
            self._adopted.add(rid)
            return

        if rid and rid in self._adopted:
            if reply.abort:
                self.manager.abort_release(rid)
            if reply.start_stage:
                self.manager.permit_stage(rid, reply.start_stage)
            waiting = self.manager.waiting_phase(rid)
            if waiting is not None:
                try:
                    if self.parent.end_stage(node, rid, waiting):
                        self.manager.set_parent_gate(rid, waiting)
                except Exception:
                    pass
        for adopted_rid in list(self._adopted):
            pending = self.manager.pop_upward_results(adopted_rid)
            for i, result in enumerate(pending):
                try:
                    self.parent.post_result(node, adopted_rid, result)
                except Exception:
                    # Transient delivery failure: keep the order, retry later.
                    self.manager.requeue_upward_results(adopted_rid, pending[i:])
                    break
