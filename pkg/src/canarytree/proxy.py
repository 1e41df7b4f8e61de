"""The proxy function: deployed at the public endpoint of a function under
test, it filters traffic between the base and new versions, mirrors dark
launches, and reports every call to its agent.

Reconfiguring for a new stage is an atomic in-place swap, so only the
initial installation and the final replacement touch the platform (and can
incur simulated downtime).
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backend import Endpoint, FaasPlatform, InvokeRequest, InvokeResponse
from .errors import Unavailable, UnknownVariant
from .routing import RequestMeta, RoutingConfig, route
from .telemetry import TelemetryEmitter

CLIENT_ID_HEADER = "X-Client-Id"
CHOICE_HEADER = "X-Function-Choice"
COOKIE_NAME = "uc-client"


def _cookie_value(request: InvokeRequest) -> str | None:
    raw = request.header("cookie")
    if not raw:
        return None
    for part in raw.split(";"):
        name, _, value = part.strip().partition("=")
        if name == COOKIE_NAME and value:
            return value
    return None


@dataclass(frozen=True)
class _StageBinding:
    stage_name: str
    config: RoutingConfig
    targets: dict[str, Endpoint]


class ProxyFunction:
    """Request handler installed at a public endpoint during a live test."""

    def __init__(
        self,
        platform: FaasPlatform,
        function_name: str,
        emitter: TelemetryEmitter,
        overhead_ms: float = 2.0,
    ) -> None:
        self._platform = platform
        self._function_name = function_name
        self._emitter = emitter
        self.overhead_ms = overhead_ms
        self._lock = threading.Lock()
        self._binding: _StageBinding | None = None
        self._draws = 0
        self._mirror_pool = ThreadPoolExecutor(max_workers=2, thread_name_prefix="mirror")

    def configure(
        self,
        stage_name: str,
        config: RoutingConfig,
        base_endpoint: Endpoint,
        new_endpoint: Endpoint,
    ) -> None:
        """Swap the active stage; atomic, no platform operation, no downtime."""
        binding = _StageBinding(
            stage_name=stage_name,
            config=config,
            targets={config.base_label: base_endpoint, config.new_label: new_endpoint},
        )
        with self._lock:
            self._binding = binding
            self._draws = 0

    def handle(self, request: InvokeRequest) -> InvokeResponse:
        with self._lock:
            binding = self._binding
            index = self._draws
            self._draws += 1
        if binding is None:
            return InvokeResponse(status=503, body="proxy not configured")

        meta = RequestMeta(
            client_id=request.header(CLIENT_ID_HEADER),
            explicit_choice=request.header(CHOICE_HEADER),
            cookie_uuid=_cookie_value(request),
        )
        try:
            decision = route(meta, binding.config, draw_index=index)
        except UnknownVariant as exc:
            return InvokeResponse(status=400, body=str(exc))

        if self.overhead_ms > 0:
            time.sleep(self.overhead_ms / 1000.0)

        response = self._invoke(binding, decision.serve_variant, request, meta.client_id, mirror=False)

        if decision.mirror_variant is not None:
            self._mirror_pool.submit(
                self._invoke, binding, decision.mirror_variant, request, meta.client_id, True
            )

        headers = {
            "x-served-by": decision.serve_variant,
            "x-proxied": "1",
            "x-stage": binding.stage_name,
        }
        if decision.issued_cookie:
            headers["set-cookie"] = f"{COOKIE_NAME}={decision.issued_cookie}"
        return InvokeResponse(
            status=response.status,
            body=response.body,
            headers=headers,
            duration_ms=response.duration_ms,
        )

    def _invoke(
        self,
        binding: _StageBinding,
        variant: str,
        request: InvokeRequest,
        client_id: str | None,
        mirror: bool,
    ) -> InvokeResponse:
        target = binding.targets[variant]
        try:
            response = self._platform.invoke(target, request)
            error = response.status >= 500
            duration = response.duration_ms
        except Unavailable as exc:
            response = InvokeResponse(status=503, body=str(exc))
            error = True
            duration = 0.0
        self._emitter.emit(
            stage=binding.stage_name,
            variant=variant,
            duration_ms=duration,
            error=error,
            client_id=client_id,
            mirror=mirror,
        )
        return response

    def close(self) -> None:
        self._mirror_pool.shutdown(wait=True)
