"""Provider-agnostic deployment/invocation interface plus the in-process
mock platform used for desk-scale experiments.

Agents and release managers compile against ``FaasPlatform`` only; a real
provider adapter would slot in behind the same four operations. The mock
resolves artifacts to declarative behavior specs (latency and error models)
instead of executable code, which keeps experiments deterministic.
"""

from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol

from .errors import DeployFailed, Unavailable, Unreachable
from .strategy import FunctionRef


@dataclass(frozen=True)
class Endpoint:
    function_name: str
    address: str
    platform_id: str


@dataclass(frozen=True)
class LatencyModel:
    """Sampled latency = base_ms + uniform(0, jitter_ms), never negative."""

    base_ms: float
    jitter_ms: float = 0.0


@dataclass(frozen=True)
class MockFunctionSpec:
    version: str
    latency: LatencyModel = field(default_factory=lambda: LatencyModel(base_ms=0.0))
    error_probability: float = 0.0
    replace_downtime_ms: float | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MockFunctionSpec":
        return cls(
            version=data["version"],
            latency=LatencyModel(
                base_ms=float(data.get("base_ms", 0.0)),
                jitter_ms=float(data.get("jitter_ms", 0.0)),
            ),
            error_probability=float(data.get("error_probability", 0.0)),
            replace_downtime_ms=(
                float(data["replace_downtime_ms"]) if data.get("replace_downtime_ms") is not None else None
            ),
        )


@dataclass(frozen=True)
class InvokeRequest:
    headers: Mapping[str, str] = field(default_factory=dict)
    body: str = ""

    def header(self, name: str) -> str | None:
        for key, value in self.headers.items():
            if key.lower() == name.lower():
                return value
        return None


@dataclass(frozen=True)
class InvokeResponse:
    status: int
    body: str
    headers: Mapping[str, str] = field(default_factory=dict)
    duration_ms: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status < 500


class RequestHandler(Protocol):
    def handle(self, request: InvokeRequest) -> InvokeResponse: ...


class FaasPlatform(Protocol):
    """The four operations every adapter must provide."""

    platform_id: str
    platform_kind: str

    def deploy(self, fn: FunctionRef) -> Endpoint: ...
    def replace(self, endpoint: Endpoint, fn: FunctionRef) -> Endpoint: ...
    def invoke(self, endpoint: Endpoint | str, request: InvokeRequest) -> InvokeResponse: ...
    def remove(self, endpoint: Endpoint | str) -> None: ...


@dataclass(frozen=True)
class PlatformEvent:
    kind: str  # deploy | replace | remove
    name: str
    serving: str
    ts: float
    downtime_ms: float = 0.0


class _FunctionBehavior:
    """Executes a mock function: sleep per the latency model, maybe error."""

    def __init__(self, name: str, spec: MockFunctionSpec, rng: random.Random) -> None:
        self._name = name
        self._spec = spec
        self._rng = rng
        self._lock = threading.Lock()

    def handle(self, request: InvokeRequest) -> InvokeResponse:
        spec = self._spec
        with self._lock:
            jitter = self._rng.uniform(0.0, spec.latency.jitter_ms) if spec.latency.jitter_ms > 0 else 0.0
            is_error = self._rng.random() < spec.error_probability if spec.error_probability > 0 else False
        duration = max(0.0, spec.latency.base_ms + jitter)
        if duration > 0:
            time.sleep(duration / 1000.0)
        if is_error:
            return InvokeResponse(
                status=500,
                body=f"{self._name}:{spec.version}:error",
                headers={"x-served-by": spec.version},
                duration_ms=duration,
            )
        return InvokeResponse(
            status=200,
            body=f"{self._name}:{spec.version}",
            headers={"x-served-by": spec.version},
            duration_ms=duration,
        )


@dataclass
class _Slot:
    handler: RequestHandler
    serving: str              # version label, or "proxy" for a proxy handler
    fn: FunctionRef | None
    unavailable_until: float = 0.0


class MockPlatform:
    """In-process FaaS platform with simulated replacement downtime.

    Function behavior is resolved from the version registry, or from an
    inline artifact of the form ``mock:{"base_ms": 20, ...}``. Error and
    jitter draws come from a per-endpoint RNG seeded from the platform seed,
    so runs are reproducible.
    """

    platform_kind = "mock"

    def __init__(
        self,
        platform_id: str = "mock",
        seed: int = 0,
        replace_downtime_ms: float = 0.0,
        specs: Mapping[str, MockFunctionSpec] | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.platform_id = platform_id
        self.seed = seed
        self.default_replace_downtime_ms = replace_downtime_ms
        self._registry: dict[str, MockFunctionSpec] = dict(specs or {})
        self._slots: dict[str, _Slot] = {}
        self._lock = threading.RLock()
        self._clock = clock
        self._stopped = False
        self.events: list[PlatformEvent] = []

    # -- configuration -------------------------------------------------------

    def register_spec(self, spec: MockFunctionSpec) -> None:
        self._registry[spec.version] = spec

    def stop(self) -> None:
        self._stopped = True

    def start(self) -> None:
        self._stopped = False

    def ping(self) -> None:
        """Cheap health probe; raises Unreachable when the platform is down."""
        if self._stopped:
            raise Unreachable(f"platform {self.platform_id} is stopped")

    # -- helpers ---------------------------------------------------------------

    def _endpoint(self, name: str) -> Endpoint:
        return Endpoint(function_name=name, address=f"mock://{self.platform_id}/{name}", platform_id=self.platform_id)

    def _resolve_spec(self, fn: FunctionRef) -> MockFunctionSpec:
        if fn.artifact.startswith("mock:"):
            try:
                data = json.loads(fn.artifact[len("mock:"):])
            except json.JSONDecodeError as exc:
                raise DeployFailed(f"inline mock artifact is not valid JSON: {exc}") from exc
            return MockFunctionSpec.from_dict({"version": fn.version, **data})
        spec = self._registry.get(fn.version)
        if spec is None:
            raise DeployFailed(f"no behavior registered for version {fn.version!r} on {self.platform_id}")
        return spec

    def _behavior(self, name: str, spec: MockFunctionSpec) -> _FunctionBehavior:
        rng = random.Random(f"{self.seed}:{self.platform_id}:{name}:{spec.version}")
        return _FunctionBehavior(name, spec, rng)

    def _downtime_for(self, spec: MockFunctionSpec | None) -> float:
        if spec is not None and spec.replace_downtime_ms is not None:
            return spec.replace_downtime_ms
        return self.default_replace_downtime_ms

    def _install(self, name: str, slot: _Slot, downtime_ms: float, kind: str) -> Endpoint:
        now = self._clock()
        slot.unavailable_until = now + downtime_ms / 1000.0 if downtime_ms > 0 else 0.0
        self._slots[name] = slot
        self.events.append(PlatformEvent(kind=kind, name=name, serving=slot.serving, ts=now, downtime_ms=downtime_ms))
        return self._endpoint(name)

    @staticmethod
    def _name_of(endpoint: Endpoint | str) -> str:
        return endpoint.function_name if isinstance(endpoint, Endpoint) else endpoint

    # -- platform interface ----------------------------------------------------

    def deploy(self, fn: FunctionRef) -> Endpoint:
        """Idempotent for the same (name, version); otherwise last write wins."""
        if self._stopped:
            raise Unreachable(f"platform {self.platform_id} is stopped")
        spec = self._resolve_spec(fn)
        with self._lock:
            existing = self._slots.get(fn.name)
            if existing is not None and existing.fn is not None and existing.fn.version == fn.version:
                return self._endpoint(fn.name)
            downtime = self._downtime_for(spec) if existing is not None else 0.0
            slot = _Slot(handler=self._behavior(fn.name, spec), serving=fn.version, fn=fn)
            kind = "replace" if existing is not None else "deploy"
            return self._install(fn.name, slot, downtime, kind)

    def replace(self, endpoint: Endpoint | str, fn: FunctionRef) -> Endpoint:
        """Swap what an endpoint serves, with simulated unavailability."""
        if self._stopped:
            raise Unreachable(f"platform {self.platform_id} is stopped")
        name = self._name_of(endpoint)
        spec = self._resolve_spec(FunctionRef(name=name, version=fn.version, artifact=fn.artifact))
        with self._lock:
            slot = _Slot(handler=self._behavior(name, spec), serving=fn.version, fn=fn)
            return self._install(name, slot, self._downtime_for(spec), "replace")

    def deploy_handler(self, name: str, handler: RequestHandler, serving: str = "proxy") -> Endpoint:
        """Install a custom handler (the proxy function) at an endpoint."""
        if self._stopped:
            raise Unreachable(f"platform {self.platform_id} is stopped")
        with self._lock:
            existing = name in self._slots
            downtime = self.default_replace_downtime_ms if existing else 0.0
            slot = _Slot(handler=handler, serving=serving, fn=None)
            return self._install(name, slot, downtime, "replace" if existing else "deploy")

    def invoke(self, endpoint: Endpoint | str, request: InvokeRequest) -> InvokeResponse:
        name = self._name_of(endpoint)
        with self._lock:
            if self._stopped:
                raise Unavailable(f"platform {self.platform_id} is stopped")
            slot = self._slots.get(name)
            if slot is None:
                raise Unavailable(f"no endpoint {name!r} on {self.platform_id}")
            if slot.unavailable_until and self._clock() < slot.unavailable_until:
                raise Unavailable(f"endpoint {name!r} is being replaced")
            handler = slot.handler
        return handler.handle(request)

    def remove(self, endpoint: Endpoint | str) -> None:
        """Idempotent; removing an absent endpoint is a no-op."""
        name = self._name_of(endpoint)
        with self._lock:
            if name in self._slots:
                del self._slots[name]
                self.events.append(PlatformEvent(kind="remove", name=name, serving="", ts=self._clock()))

    # -- introspection (tests, harness) -----------------------------------------

    def serving(self, name: str) -> str | None:
        with self._lock:
            slot = self._slots.get(name)
            return slot.serving if slot else None

    def replacement_windows(self, name: str | None = None) -> list[tuple[float, float]]:
        """[start, end] spans during which an endpoint was unavailable."""
        return [
            (e.ts, e.ts + e.downtime_ms / 1000.0)
            for e in self.events
            if e.downtime_ms > 0 and (name is None or e.name == name)
        ]
