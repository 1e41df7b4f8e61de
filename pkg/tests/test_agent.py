from __future__ import annotations

import threading
import time

import pytest

from canarytree.agent import Agent, InProcessParent, StageRun, end_conditions_met
from canarytree.backend import InvokeRequest, LatencyModel, MockFunctionSpec, MockPlatform
from canarytree.manager import ReleaseManager
from canarytree.proxy import CLIENT_ID_HEADER
from canarytree.strategy import FunctionRef, strategy_from_dict
from canarytree.telemetry import CallRecord

from conftest import make_doc


def fast_doc(stages=None, v2_error_threshold=0.5):
    doc = make_doc()
    for stage in doc["stages"]:
        stage["end_conditions"] = {"min_calls": 5, "min_duration_s": 0.2}
        for cond in stage.get("metric_conditions", []):
            if cond["metric"] == "error_rate":
                cond["threshold"] = v2_error_threshold
            else:
                cond["threshold"] = 1000
    if stages is not None:
        doc["stages"] = [s for s in doc["stages"] if s["name"] in stages]
    return doc


class Harness:
    def __init__(self, tmp_path, v2_error=0.0, downtime=0.0):
        self.platform = MockPlatform(platform_id="local", seed=11, replace_downtime_ms=downtime)
        self.platform.register_spec(MockFunctionSpec(version="v1", latency=LatencyModel(base_ms=0.5)))
        self.platform.register_spec(
            MockFunctionSpec(version="v2", latency=LatencyModel(base_ms=0.5), error_probability=v2_error)
        )
        self.platform.deploy(FunctionRef(name="checkout", version="v1"))
        self.rm = ReleaseManager("root", poll_interval=0.05)
        self.agent = Agent(
            node_id="a1",
            region="cloud",
            platform=self.platform,
            parent=InProcessParent(self.rm),
            poll_interval=0.05,
            check_interval=0.05,
            proxy_overhead_ms=0.0,
            results_log=tmp_path / "a1.ndjson",
        )
        self._stop = threading.Event()
        self._loader = threading.Thread(target=self._pump, daemon=True)

    def _pump(self):
        k = 0
        while not self._stop.is_set():
            try:
                self.platform.invoke(
                    "checkout", InvokeRequest(headers={CLIENT_ID_HEADER: f"user-{k % 20:03d}"})
                )
            except Exception:
                pass
            k += 1
            time.sleep(0.004)

    def run(self, doc, timeout=20.0):
        self.agent.start()
        self._loader.start()
        rid = self.rm.submit_release(strategy_from_dict(doc))
        deadline = time.time() + timeout
        while time.time() < deadline:
            if self.rm.release_overview(rid)["overall"] != "running":
                break
            time.sleep(0.05)
        overview = self.rm.release_overview(rid)
        return rid, overview

    def close(self):
        self._stop.set()
        self.agent.close()


@pytest.fixture
def harness(tmp_path):
    instances = []

    def factory(**kw):
        h = Harness(tmp_path, **kw)
        instances.append(h)
        return h

    yield factory
    for h in instances:
        h.close()


def test_end_conditions_conjunction():
    stage_doc = fast_doc(stages=["canary"])["stages"][0]
    stage_doc["end_conditions"] = {"min_calls": 100, "min_duration_s": 10}
    stage = strategy_from_dict(
        {**make_doc(), "stages": [stage_doc]}
    ).stages[0]
    run = StageRun(stage, started_at=1000.0)
    for i in range(100):
        run.add(CallRecord(ts=0, stage="canary", variant="v1", duration_ms=1.0, error=False))
    assert end_conditions_met(run, now=1010.0) is True
    assert end_conditions_met(run, now=1005.0) is False  # both thresholds required

    short = StageRun(stage, started_at=1000.0)
    for i in range(99):
        short.add(CallRecord(ts=0, stage="canary", variant="v1", duration_ms=1.0, error=False))
    assert end_conditions_met(short, now=1010.0) is False


def test_end_conditions_degenerate_zero():
    doc = fast_doc(stages=["canary"])
    doc["stages"][0]["end_conditions"] = {"min_calls": 0, "min_duration_s": 0}
    stage = strategy_from_dict(doc).stages[0]
    run = StageRun(stage, started_at=1000.0)
    assert end_conditions_met(run, now=1000.0) is True


def test_mirror_records_do_not_count_as_served():
    doc = fast_doc(stages=["canary"])
    stage = strategy_from_dict(doc).stages[0]
    run = StageRun(stage, started_at=0.0)
    for i in range(4):
        run.add(CallRecord(ts=0, stage="canary", variant="v1", duration_ms=1.0, error=False))
        run.add(CallRecord(ts=0, stage="canary", variant="v2", duration_ms=1.0, error=False, mirror=True))
    assert run.served_count() == 4


def test_single_stage_completes(harness, tmp_path):
    h = harness()
    rid, overview = h.run(fast_doc(stages=["canary"]))
    assert overview["overall"] == "done"
    assert overview["children"]["a1"]["stages"]["canary"] == "Completed"
    log_text = (tmp_path / "a1.ndjson").read_text()
    assert '"kind":"start"' in log_text and '"kind":"end"' in log_text


def test_failing_stage_rolls_back(harness):
    h = harness(v2_error=1.0)
    doc = fast_doc(stages=["canary"], v2_error_threshold=0.02)
    doc["stages"][0]["traffic_new_percent"] = 50
    rid, overview = h.run(doc)
    assert overview["overall"] == "failed"
    assert overview["children"]["a1"]["stages"]["canary"] == "Failure"
    # Rollback target is live and serving directly.
    assert h.platform.serving("checkout") == "v1"
    response = h.platform.invoke("checkout", InvokeRequest())
    assert response.ok and "x-proxied" not in response.headers


def test_backend_killed_mid_stage_is_error(harness):
    h = harness()
    doc = fast_doc(stages=["canary"])
    doc["stages"][0]["end_conditions"] = {"min_calls": 5, "min_duration_s": 30}

    def kill_later():
        time.sleep(1.0)
        h.platform.stop()

    threading.Thread(target=kill_later, daemon=True).start()
    rid, overview = h.run(doc, timeout=15.0)
    assert overview["overall"] == "failed"
    assert overview["children"]["a1"]["stages"]["canary"] == "Error"


def test_public_endpoint_removed_mid_stage_is_error(harness):
    h = harness()
    doc = fast_doc(stages=["canary"])
    doc["stages"][0]["end_conditions"] = {"min_calls": 5, "min_duration_s": 30}

    def remove_later():
        time.sleep(1.0)
        h.platform.remove("checkout")

    threading.Thread(target=remove_later, daemon=True).start()
    rid, overview = h.run(doc, timeout=15.0)
    assert overview["overall"] == "failed"
    assert overview["children"]["a1"]["stages"]["canary"] == "Error"


def test_full_release_promotes_new_version(harness):
    h = harness()
    rid, overview = h.run(fast_doc(), timeout=40.0)
    assert overview["overall"] == "done"
    stages = overview["children"]["a1"]["stages"]
    assert all(v == "Completed" for v in stages.values())
    assert list(stages)[-1] == "rollout-04"
    # Promotion replaced the proxy with the new version, served directly.
    assert h.platform.serving("checkout") == "v2"
    response = h.platform.invoke("checkout", InvokeRequest())
    assert response.headers["x-served-by"] == "v2"
    assert "x-proxied" not in response.headers


def test_stage_with_no_conditions_auto_completes(harness):
    h = harness()
    doc = fast_doc(stages=["gradual-10", "gradual-50", "gradual-90"])
    rid, overview = h.run(doc, timeout=30.0)
    assert overview["overall"] == "done"


def test_dark_launch_mirror_stage(harness):
    h = harness()
    doc = fast_doc(stages=["canary"])
    doc["stages"][0]["mirror"] = True
    rid, overview = h.run(doc)
    assert overview["overall"] == "done"
    result = [r for r in h.rm.pop_upward_results(rid) if r.stage_name == "canary"][0]
    # Users only ever saw the base version; the new one ran in the dark.
    assert result.summary.for_variant("v1").call_count >= 5
    assert result.summary.for_variant("v2").call_count >= 1
