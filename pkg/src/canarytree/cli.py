"""Operator tooling.

Verbs: run-rm, run-agent (long-running nodes), submit, signal-end,
loadgen, export, report. Node configuration files are YAML:

    role: agent                 # rm | agent
    node_id: cloud-agent
    region: cloud
    parent: http://127.0.0.1:7000
    listen: 127.0.0.1:7001
    poll_interval_s: 1.0
    check_interval_s: 1.0
    seed: 7
    proxy_overhead_ms: 2.0
    results_log: cloud-agent.ndjson
    backend:
      kind: mock
      seed: 42
      replace_downtime_ms: 0
      expose: true
      functions:
        - {version: v1, base_ms: 20, jitter_ms: 0, error_probability: 0}
      predeploy:
        - {name: echo, version: v1}
"""

from __future__ import annotations

import json
import signal
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import click
import yaml

from .agent import Agent
from .backend import MockFunctionSpec, MockPlatform
from .errors import CanarytreeError, ConfigError
from .export import build_export, export_run, load_export, read_rows_csv, write_rows_csv
from .httpapi import HttpParent, NodeHttpServer
from .loadgen import HttpTarget, LoadProfile, run_load
from .manager import ReleaseManager
from .reporting import overhead_summary, render_latency_timeline, render_overhead_comparison
from .rmdriver import RmChildDriver
from .strategy import FunctionRef, parse_strategy, strategy_to_dict


def _load_config(path: str) -> dict[str, Any]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a mapping")
    return dict(data)


def _listen_of(config: Mapping[str, Any]) -> tuple[str, int]:
    listen = str(config.get("listen", "127.0.0.1:0"))
    host, _, port = listen.partition(":")
    try:
        return host or "127.0.0.1", int(port or "0")
    except ValueError as exc:
        raise ConfigError(f"bad listen address {listen!r}") from exc


def _build_platform(config: Mapping[str, Any], node_id: str) -> MockPlatform:
    backend = config.get("backend") or {}
    kind = backend.get("kind", "mock")
    if kind != "mock":
        raise ConfigError(f"unsupported backend kind {kind!r} (only 'mock' ships with this package)")
    platform = MockPlatform(
        platform_id=backend.get("platform_id", f"{node_id}-mock"),
        seed=int(backend.get("seed", 0)),
        replace_downtime_ms=float(backend.get("replace_downtime_ms", 0.0)),
    )
    for raw in backend.get("functions", []) or []:
        platform.register_spec(MockFunctionSpec.from_dict(raw))
    for raw in backend.get("predeploy", []) or []:
        platform.deploy(FunctionRef(name=raw["name"], version=raw["version"]))
    return platform


@dataclass
class RunningNode:
    server: NodeHttpServer
    closers: list[Any]

    def close(self) -> None:
        for closer in self.closers:
            closer.close()
        self.server.close()


def build_node(config: Mapping[str, Any]) -> RunningNode:
    role = config.get("role")
    node_id = config.get("node_id")
    if role not in ("rm", "agent"):
        raise ConfigError("role must be 'rm' or 'agent'")
    if not node_id:
        raise ConfigError("node_id is required")
    host, port = _listen_of(config)
    parent_url = config.get("parent")
    poll = float(config.get("poll_interval_s", 1.0))

    if role == "agent":
        if not parent_url:
            raise ConfigError("agents require a parent address")
        platform = _build_platform(config, node_id)
        agent = Agent(
            node_id=node_id,
            region=str(config.get("region", "")),
            platform=platform,
            parent=HttpParent(parent_url),
            poll_interval=poll,
            check_interval=float(config.get("check_interval_s", 1.0)),
            seed=int(config.get("seed", 0)),
            proxy_overhead_ms=float(config.get("proxy_overhead_ms", 2.0)),
            results_log=config.get("results_log", f"{node_id}.ndjson"),
        )
        exposed = platform if (config.get("backend") or {}).get("expose", True) else None
        server = NodeHttpServer(
            collector=agent.collector, platform=exposed, host=host, port=port
        ).start()
        agent.start()
        return RunningNode(server=server, closers=[agent])

    manager = ReleaseManager(
        node_id=node_id,
        region=str(config.get("region", "")),
        poll_interval=poll,
        liveness_misses=int(config.get("liveness_misses", 10)),
    )
    server = NodeHttpServer(manager=manager, host=host, port=port).start()
    closers: list[Any] = []
    if parent_url:
        driver = RmChildDriver(manager, HttpParent(parent_url))
        driver.start()
        closers.append(driver)
    return RunningNode(server=server, closers=closers)


def _serve_forever(node: RunningNode) -> None:
    stop = threading.Event()

    def _handle(signum: int, frame: Any) -> None:
        stop.set()

    signal.signal(signal.SIGINT, _handle)
    signal.signal(signal.SIGTERM, _handle)
    click.echo(f"listening on {node.server.address}")
    try:
        while not stop.wait(0.5):
            pass
    finally:
        node.close()


@click.group()
def main() -> None:
    """Staged live testing for serverless functions."""


@main.command("run-rm")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def run_rm(config_path: str) -> None:
    """Run a release manager node."""
    config = _load_config(config_path)
    if config.get("role", "rm") != "rm":
        raise ConfigError("run-rm requires role: rm")
    config["role"] = "rm"
    _serve_forever(build_node(config))


@main.command("run-agent")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def run_agent(config_path: str) -> None:
    """Run an agent node against its local platform."""
    config = _load_config(config_path)
    if config.get("role", "agent") != "agent":
        raise ConfigError("run-agent requires role: agent")
    config["role"] = "agent"
    _serve_forever(build_node(config))


@main.command()
@click.argument("strategy_file", type=click.Path(exists=True))
@click.option("--root", required=True, help="root manager base URL")
def submit(strategy_file: str, root: str) -> None:
    """Validate a strategy file and submit it to the root manager."""
    text = Path(strategy_file).read_text(encoding="utf-8")
    strategy = parse_strategy(text)
    release_id = HttpParent(root).submit(strategy_to_dict(strategy))
    click.echo(release_id)


@main.command("signal-end")
@click.option("--root", required=True)
@click.option("--release", required=True)
@click.option("--stage", required=True)
def signal_end(root: str, release: str, stage: str) -> None:
    """Manually terminate an active WaitForSignal stage."""
    HttpParent(root).signal_end(release, stage)
    click.echo("ok")


@main.command()
@click.option("--root", required=True)
@click.option("--release", required=True)
def status(root: str, release: str) -> None:
    """Show a release's per-child state."""
    click.echo(json.dumps(HttpParent(root).status(release), indent=2))


def parse_client_spec(spec: str) -> list[str]:
    """'prefix:N' expands to prefix-padded ids; otherwise comma-separated."""
    if ":" in spec:
        prefix, _, count = spec.rpartition(":")
        return [f"{prefix}{i:03d}" for i in range(int(count))]
    return [s for s in spec.split(",") if s]


@main.command("loadgen")
@click.option("--target", required=True, help="endpoint URL, e.g. http://host:port/fn/echo")
@click.option("--rate", type=float, required=True)
@click.option("--duration", type=float, required=True)
@click.option("--clients", default="", help="'prefix:N' or comma-separated ids")
@click.option("--node", default="", help="location label written into rows")
@click.option("--out", "out_path", required=True, type=click.Path())
def loadgen_cmd(target: str, rate: float, duration: float, clients: str, node: str, out_path: str) -> None:
    """Issue requests at a constant rate and record per-call rows."""
    profile = LoadProfile(
        rate_per_s=rate,
        duration_s=duration,
        client_ids=parse_client_spec(clients) if clients else (),
        node=node,
    )
    rows = run_load(HttpTarget(target), profile)
    write_rows_csv(rows, out_path)
    errors = sum(1 for r in rows if r.error)
    click.echo(f"{len(rows)} rows, {errors} errors -> {out_path}")


@main.command()
@click.option("--rows", "rows_paths", multiple=True, type=click.Path(exists=True))
@click.option("--log", "log_paths", multiple=True, type=click.Path(exists=True))
@click.option("--release", default=None, help="restrict markers to one release id")
@click.option("--out", "out_base", required=True, type=click.Path())
@click.option("--format", "formats", default="csv,json", show_default=True)
def export(rows_paths: tuple[str, ...], log_paths: tuple[str, ...], release: str | None,
           out_base: str, formats: str) -> None:
    """Merge loadgen rows and agent logs into CSV/JSON run exports."""
    rows = []
    for path in rows_paths:
        rows.extend(read_rows_csv(path))
    rows.sort(key=lambda r: r.ts_ms)
    run = build_export(rows, log_paths, release_id=release)
    written = export_run(run, out_base, formats=tuple(f.strip() for f in formats.split(",")))
    for kind, path in written.items():
        click.echo(f"{kind}: {path}")


@main.command()
@click.option("--export", "export_base", required=True, type=click.Path())
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--title", default="latency over time")
def report(export_base: str, out_dir: str | None, title: str) -> None:
    """Render figures next to an export: latency timeline, and a
    direct-vs-proxied overhead comparison when both kinds of rows exist."""
    base = Path(export_base)
    run = load_export(base)
    out = Path(out_dir) if out_dir else base.parent
    out.mkdir(parents=True, exist_ok=True)
    timeline = render_latency_timeline(run, out / f"{base.stem}-timeline.png", title=title)
    click.echo(f"figure: {timeline}")
    direct = [r for r in run.rows if not r.proxied and not r.error]
    proxied = [r for r in run.rows if r.proxied and not r.error]
    if direct and proxied:
        figure = render_overhead_comparison([(direct, proxied)], out / f"{base.stem}-overhead.png")
        summary = overhead_summary(direct, proxied)
        click.echo(f"figure: {figure}")
        click.echo(
            "overhead: proxied median {proxied_median_ms:.2f} ms - direct median "
            "{direct_median_ms:.2f} ms = {overhead_ms:.2f} ms".format(**summary)
        )


def entrypoint() -> None:
    try:
        main(standalone_mode=True)
    except CanarytreeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    entrypoint()
