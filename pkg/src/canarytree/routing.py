"""Variant routing: which version serves a request.

Sticky assignment uses a 64-bit FNV-1a hash of the client identifier with a
threshold compare, so raising the traffic percentage only ever adds exposed
clients and never reassigns one back to the old version. Random routing is a
deterministic weighted schedule (seeded phase), which keeps observed shares
within one request of the configured percentage at any sample size.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass

from .errors import UnknownVariant
from .strategy import RoutingMethod

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# Percentages are compared in hundredths of a percent on a 0..10000 scale.
_BUCKETS = 10_000


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a; fixed and dependency-free so every node agrees."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def hash_bucket(identifier: str) -> int:
    """Stable bucket in [0, 10000) for a client identifier."""
    return fnv1a_64(identifier.encode("utf-8")) % _BUCKETS


def sticky_serves_new(identifier: str, traffic_new_percent: float) -> bool:
    return hash_bucket(identifier) < round(traffic_new_percent * 100)


def weighted_draw(seed: int, index: int, traffic_new_percent: float) -> bool:
    """Deterministic schedule serving `new` with long-run frequency percent/100.

    Pure in (seed, index, percent): any draw can be recomputed, and the count
    of `new` picks over any window of n draws is within 1 of n * percent/100.
    """
    p = round(traffic_new_percent * 100)
    phase = (seed * 2654435761) % _BUCKETS
    before = (phase + index * p) // _BUCKETS
    after = (phase + (index + 1) * p) // _BUCKETS
    return after > before


@dataclass(frozen=True)
class RequestMeta:
    """Routing-relevant request metadata extracted from headers."""

    client_id: str | None = None
    explicit_choice: str | None = None
    cookie_uuid: str | None = None


@dataclass(frozen=True)
class RoutingConfig:
    method: RoutingMethod
    traffic_new_percent: float
    base_label: str
    new_label: str
    mirror: bool = False
    seed: int = 0


@dataclass(frozen=True)
class RoutingDecision:
    serve_variant: str
    mirror_variant: str | None = None
    issued_cookie: str | None = None


def route(meta: RequestMeta, config: RoutingConfig, draw_index: int = 0) -> RoutingDecision:
    """Decide which variant serves this request.

    `draw_index` is the caller's per-stage request counter; only the Random
    path consumes it. Header and hash paths are pure functions of the inputs.
    """
    if config.mirror:
        # Dark launch: results never reach the user, base always serves.
        return RoutingDecision(serve_variant=config.base_label, mirror_variant=config.new_label)

    identifier = meta.client_id or meta.cookie_uuid
    issued: str | None = None

    if config.method is RoutingMethod.HEADER and meta.explicit_choice is not None:
        choice = meta.explicit_choice
        if choice not in (config.base_label, config.new_label):
            raise UnknownVariant(f"{choice!r} is neither {config.base_label!r} nor {config.new_label!r}")
        return RoutingDecision(serve_variant=choice)

    if config.method in (RoutingMethod.CLIENT_ID_HASH, RoutingMethod.HEADER) and identifier is None:
        if config.method is RoutingMethod.CLIENT_ID_HASH:
            issued = str(uuid.uuid4())
            identifier = issued
        # Header method without choice or identifier falls through to Random.

    if identifier is not None and config.method is not RoutingMethod.RANDOM:
        serve_new = sticky_serves_new(identifier, config.traffic_new_percent)
    else:
        serve_new = weighted_draw(config.seed, draw_index, config.traffic_new_percent)

    serve = config.new_label if serve_new else config.base_label
    return RoutingDecision(serve_variant=serve, issued_cookie=issued)
