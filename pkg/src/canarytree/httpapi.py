"""HTTP surface of the pull protocol and of agent-side ingestion.

Manager endpoints (JSON bodies, status strings exactly as the state
machines define them):

    POST /register                  child registration / capability report
    GET  /poll?node=<id>
    GET  /release?node=<id>&release=<id>
    POST /result
    GET  /end_stage?node=<id>&release=<id>&stage=<name>
    POST /submit                    developer-facing strategy submission
    POST /signal_end                operator ends a WaitForSignal stage
    GET  /status?release=<id>

Agent endpoints:

    POST /metrics/ingest            newline-delimited JSON call records
    *    /fn/<name>                 invoke a platform endpoint over HTTP
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import parse_qs, urlparse

import requests

from . import errors
from .backend import InvokeRequest, MockPlatform
from .errors import (
    CanarytreeError,
    DuplicateNode,
    InsufficientCapabilities,
    NotWaiting,
    OutOfOrderResult,
    StrategySyntaxError,
    Unavailable,
    UnknownNode,
    UnknownRelease,
    Unreachable,
    ValidationError,
    WrongState,
)
from .manager import NodeInfo, PollReply, ReleaseManager
from .metrics import StageResult
from .strategy import parse_strategy, strategy_from_dict
from .telemetry import RecordCollector, decode_records, encode_records

_STATUS_BY_ERROR: dict[type, int] = {
    ValidationError: 400,
    StrategySyntaxError: 400,
    UnknownNode: 404,
    UnknownRelease: 404,
    WrongState: 409,
    OutOfOrderResult: 409,
    DuplicateNode: 409,
    NotWaiting: 409,
    InsufficientCapabilities: 409,
    Unavailable: 503,
    Unreachable: 503,
}


def _error_payload(exc: CanarytreeError) -> tuple[int, dict[str, Any]]:
    status = _STATUS_BY_ERROR.get(type(exc), 500)
    return status, {"error": type(exc).__name__, "detail": str(exc)}


def _raise_remote(payload: dict[str, Any], http_status: int) -> None:
    name = payload.get("error", "")
    detail = payload.get("detail", f"HTTP {http_status}")
    cls = getattr(errors, name, None)
    if isinstance(cls, type) and issubclass(cls, CanarytreeError):
        if cls is InsufficientCapabilities:
            raise cls([])
        if cls in (ValidationError,):
            raise cls("", detail)
        raise cls(detail)
    raise CanarytreeError(detail)


class NodeHttpServer:
    """Serves a manager, an agent's ingest, and/or a platform over HTTP."""

    def __init__(
        self,
        manager: ReleaseManager | None = None,
        collector: RecordCollector | None = None,
        platform: MockPlatform | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ) -> None:
        self.manager = manager
        self.collector = collector
        self.platform = platform
        node = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args: Any) -> None:
                pass

            def _send(self, status: int, payload: dict[str, Any] | str, content_type: str = "application/json") -> None:
                body = payload if isinstance(payload, str) else json.dumps(payload)
                data = body.encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", content_type)
                self.send_header("Content-Length", str(len(data)))
                for key, value in getattr(self, "_extra_headers", {}).items():
                    self.send_header(key, value)
                self.end_headers()
                self.wfile.write(data)

            def _body(self) -> str:
                length = int(self.headers.get("Content-Length", "0"))
                return self.rfile.read(length).decode("utf-8") if length else ""

            def _dispatch(self, method: str) -> None:
                parsed = urlparse(self.path)
                query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
                try:
                    handled = node._route(self, method, parsed.path, query)
                except CanarytreeError as exc:
                    status, payload = _error_payload(exc)
                    self._send(status, payload)
                    return
                except Exception as exc:  # defensive: never kill the server thread
                    self._send(500, {"error": "InternalError", "detail": str(exc)})
                    return
                if not handled:
                    self._send(404, {"error": "NotFound", "detail": parsed.path})

            def do_GET(self) -> None:
                self._dispatch("GET")

            def do_POST(self) -> None:
                self._dispatch("POST")

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None
        self._ticker: threading.Thread | None = None
        self._stop = threading.Event()
        self.host = host
        self.port = self._server.server_address[1]

    @property
    def address(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "NodeHttpServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        if self.manager is not None:
            self._ticker = threading.Thread(target=self._sweep_loop, daemon=True)
            self._ticker.start()
        return self

    def close(self) -> None:
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.manager.poll_interval):
            try:
                self.manager.sweep()
            except Exception:
                pass

    # -- routing ----------------------------------------------------------------

    def _route(self, handler: Any, method: str, path: str, query: dict[str, str]) -> bool:
        if path == "/healthz":
            handler._send(200, {"ok": True})
            return True
        if self.manager is not None and self._route_manager(handler, method, path, query):
            return True
        if self.collector is not None and path == "/metrics/ingest" and method == "POST":
            records, losses = decode_records(handler._body())
            accepted = self.collector.ingest(records, losses)
            handler._send(200, {"accepted": accepted})
            return True
        if self.platform is not None and path.startswith("/fn/"):
            return self._route_invoke(handler, path)
        return False

    def _route_manager(self, handler: Any, method: str, path: str, query: dict[str, str]) -> bool:
        manager = self.manager
        if path == "/register" and method == "POST":
            info = NodeInfo.from_dict(json.loads(handler._body()))
            manager.register_child(info)
            handler._send(200, {"ok": True})
            return True
        if path == "/poll" and method == "GET":
            reply = manager.handle_poll(query.get("node", ""))
            handler._send(200, reply.to_dict())
            return True
        if path == "/release" and method == "GET":
            doc = manager.handle_release_fetch(query.get("node", ""), query.get("release", ""))
            handler._send(200, doc)
            return True
        if path == "/result" and method == "POST":
            body = json.loads(handler._body())
            result = StageResult.from_dict(body["result"])
            manager.handle_result(body["node"], body["release"], result)
            handler._send(200, {"ok": True})
            return True
        if path == "/end_stage" and method == "GET":
            end = manager.handle_end_stage(
                query.get("node", ""), query.get("release", ""), query.get("stage", "")
            )
            handler._send(200, {"end": end})
            return True
        if path == "/submit" and method == "POST":
            body = json.loads(handler._body())
            if "strategy_yaml" in body:
                strategy = parse_strategy(body["strategy_yaml"])
            else:
                strategy = strategy_from_dict(body["strategy"])
            rid = manager.submit_release(strategy, release_id=body.get("release"))
            handler._send(200, {"release": rid})
            return True
        if path == "/signal_end" and method == "POST":
            body = json.loads(handler._body())
            manager.signal_end(body["release"], body["stage"])
            handler._send(200, {"ok": True})
            return True
        if path == "/status" and method == "GET":
            handler._send(200, manager.release_overview(query.get("release", "")))
            return True
        if path == "/releases" and method == "GET":
            handler._send(200, {"releases": manager.release_ids()})
            return True
        if path == "/capabilities" and method == "GET":
            handler._send(200, manager.capabilities.to_dict())
            return True
        return False

    def _route_invoke(self, handler: Any, path: str) -> bool:
        name = path[len("/fn/"):]
        if not name:
            return False
        headers = {k.lower(): v for k, v in handler.headers.items()}
        request = InvokeRequest(headers=headers, body=handler._body())
        try:
            response = self.platform.invoke(name, request)
        except Unavailable as exc:
            handler._send(503, {"error": "Unavailable", "detail": str(exc)})
            return True
        handler._extra_headers = dict(response.headers)
        handler._send(response.status, response.body, content_type="text/plain")
        return True


# ---------------------------------------------------------------------------
# clients
# ---------------------------------------------------------------------------

class HttpParent:
    """ParentLink over HTTP; the client side of the pull protocol."""

    def __init__(self, base_url: str, timeout: float = 10.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()

    def _check(self, response: requests.Response) -> dict[str, Any]:
        if response.status_code >= 400:
            try:
                payload = response.json()
            except ValueError:
                payload = {"error": "", "detail": response.text}
            _raise_remote(payload, response.status_code)
        return response.json()

    def _get(self, path: str, **params: str) -> dict[str, Any]:
        try:
            return self._check(
                self._session.get(f"{self.base_url}{path}", params=params, timeout=self.timeout)
            )
        except requests.RequestException as exc:
            raise Unreachable(str(exc)) from exc

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        try:
            return self._check(
                self._session.post(f"{self.base_url}{path}", json=payload, timeout=self.timeout)
            )
        except requests.RequestException as exc:
            raise Unreachable(str(exc)) from exc

    def register(self, info: NodeInfo) -> None:
        self._post("/register", info.to_dict())

    def poll(self, node_id: str) -> PollReply:
        return PollReply.from_dict(self._get("/poll", node=node_id))

    def fetch(self, node_id: str, release_id: str) -> dict[str, Any]:
        return self._get("/release", node=node_id, release=release_id)

    def post_result(self, node_id: str, release_id: str, result: StageResult) -> None:
        self._post("/result", {"node": node_id, "release": release_id, "result": result.to_dict()})

    def end_stage(self, node_id: str, release_id: str, stage_name: str) -> bool:
        return self._get("/end_stage", node=node_id, release=release_id, stage=stage_name)["end"]

    # -- operator-facing calls --------------------------------------------------

    def submit_yaml(self, text: str) -> str:
        return self._post("/submit", {"strategy_yaml": text})["release"]

    def submit(self, strategy_dict: dict[str, Any], release_id: str | None = None) -> str:
        payload: dict[str, Any] = {"strategy": strategy_dict}
        if release_id:
            payload["release"] = release_id
        return self._post("/submit", payload)["release"]

    def signal_end(self, release_id: str, stage_name: str) -> None:
        self._post("/signal_end", {"release": release_id, "stage": stage_name})

    def status(self, release_id: str) -> dict[str, Any]:
        return self._get("/status", release=release_id)

    def releases(self) -> list[str]:
        return self._get("/releases")["releases"]

    def capabilities(self) -> dict[str, Any]:
        return self._get("/capabilities")


class HttpIngestSink:
    """Telemetry sink posting newline-delimited records to an agent."""

    def __init__(self, base_url: str, timeout: float = 5.0) -> None:
        self.url = base_url.rstrip("/") + "/metrics/ingest"
        self.timeout = timeout
        self._session = requests.Session()

    def submit(self, records, losses: int = 0) -> None:
        try:
            response = self._session.post(
                self.url, data=encode_records(records, losses), timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise errors.SinkUnavailable(str(exc)) from exc
        if response.status_code >= 400:
            raise errors.SinkUnavailable(f"ingest returned {response.status_code}")
