"""Constant-rate load generation with client identities.

Requests are issued on a fixed-interval schedule (request k fires at
start + k/rate) from a bounded worker pool, so a slow response never
stalls the schedule. Client ids rotate round-robin; cookies issued by the
proxy are stored per client and replayed.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import requests

from .backend import InvokeRequest, MockPlatform
from .errors import Unavailable
from .export import ExportRow
from .proxy import CLIENT_ID_HEADER


@dataclass(frozen=True)
class LoadProfile:
    rate_per_s: float
    duration_s: float
    client_ids: Sequence[str] = ()
    node: str = ""
    headers: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class CallOutcome:
    status: int
    headers: dict[str, str]
    duration_ms: float


class InvokeTarget(Protocol):
    def call(self, headers: dict[str, str]) -> CallOutcome: ...


class PlatformTarget:
    """Drives a mock platform endpoint in-process."""

    def __init__(self, platform: MockPlatform, function: str) -> None:
        self.platform = platform
        self.function = function

    def call(self, headers: dict[str, str]) -> CallOutcome:
        start = time.perf_counter()
        try:
            response = self.platform.invoke(self.function, InvokeRequest(headers=headers))
            status = response.status
            out_headers = dict(response.headers)
        except Unavailable:
            status = 503
            out_headers = {}
        duration_ms = (time.perf_counter() - start) * 1000.0
        return CallOutcome(status=status, headers=out_headers, duration_ms=duration_ms)


class HttpTarget:
    """Drives an endpoint exposed over HTTP (see the /fn/ route)."""

    def __init__(self, url: str, timeout: float = 10.0) -> None:
        self.url = url
        self.timeout = timeout
        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def call(self, headers: dict[str, str]) -> CallOutcome:
        start = time.perf_counter()
        try:
            response = self._session().get(self.url, headers=headers, timeout=self.timeout)
            status = response.status_code
            out_headers = {k.lower(): v for k, v in response.headers.items()}
        except requests.RequestException:
            status = 503
            out_headers = {}
        duration_ms = (time.perf_counter() - start) * 1000.0
        return CallOutcome(status=status, headers=out_headers, duration_ms=duration_ms)


def run_load(
    target: InvokeTarget,
    profile: LoadProfile,
    stop: threading.Event | None = None,
) -> list[ExportRow]:
    """Issue requests at the configured rate; returns one row per request."""
    total = round(profile.rate_per_s * profile.duration_s)
    interval = 1.0 / profile.rate_per_s
    rows: list[ExportRow] = []
    rows_lock = threading.Lock()
    cookies: dict[str, str] = {}
    cookies_lock = threading.Lock()
    ids = list(profile.client_ids)

    def issue(index: int) -> None:
        headers = dict(profile.headers)
        client_id = ids[index % len(ids)] if ids else None
        if client_id is not None:
            headers[CLIENT_ID_HEADER] = client_id
            with cookies_lock:
                cookie = cookies.get(client_id)
            if cookie:
                headers["Cookie"] = cookie
        ts_ms = time.time() * 1000.0
        outcome = target.call(headers)
        set_cookie = outcome.headers.get("set-cookie")
        if set_cookie and client_id is not None:
            with cookies_lock:
                cookies[client_id] = set_cookie.split(";")[0]
        row = ExportRow(
            ts_ms=ts_ms,
            node=profile.node,
            variant=outcome.headers.get("x-served-by", ""),
            duration_ms=outcome.duration_ms,
            error=outcome.status >= 500,
            proxied=outcome.headers.get("x-proxied") == "1",
            stage=outcome.headers.get("x-stage", ""),
            client_id=client_id or "",
        )
        with rows_lock:
            rows.append(row)

    workers = max(4, int(profile.rate_per_s))
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="loadgen") as pool:
        for k in range(total):
            if stop is not None and stop.is_set():
                break
            scheduled = start + k * interval
            delay = scheduled - time.perf_counter()
            if delay > 0:
                if stop is not None:
                    if stop.wait(delay):
                        break
                else:
                    time.sleep(delay)
            pool.submit(issue, k)
    rows.sort(key=lambda r: r.ts_ms)
    return rows


def achieved_rate(rows: Sequence[ExportRow]) -> float:
    if len(rows) < 2:
        return 0.0
    span_s = (rows[-1].ts_ms - rows[0].ts_ms) / 1000.0
    if span_s <= 0:
        return 0.0
    return (len(rows) - 1) / span_s
