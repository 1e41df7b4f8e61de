from __future__ import annotations

import copy
from typing import Any

import pytest

BASE_DOC: dict[str, Any] = {
    "id": "checkout-rollout",
    "functions": [
        {"name": "checkout", "version": "v1", "artifact": "registry:v1", "runtime": "python3"},
        {"name": "checkout", "version": "v2", "artifact": "registry:v2", "runtime": "python3"},
    ],
    "rollback": {"name": "checkout", "version": "v1"},
    "stages": [
        {
            "name": "canary",
            "type": "sequential",
            "function": "checkout",
            "variants": {"base": "v1", "new": "v2"},
            "routing": "random",
            "traffic_new_percent": 5,
            "end_conditions": {"min_calls": 100, "min_duration_s": 10},
            "metric_conditions": [
                {"metric": "error_rate", "comparator": "le", "threshold": 0.02, "applies_to": "new"},
            ],
            "on_success": "next_stage",
            "on_failure": "rollback",
        },
        {
            "name": "compare",
            "type": "sequential",
            "function": "checkout",
            "variants": {"base": "v1", "new": "v2"},
            "routing": "client_id",
            "traffic_new_percent": 50,
            "end_conditions": {"min_calls": 100, "min_duration_s": 10},
            "metric_conditions": [
                {"metric": "response_time", "aggregate": "median", "comparator": "le",
                 "threshold": 100, "applies_to": "new"},
            ],
            "on_success": "next_stage",
            "on_failure": "rollback",
        },
        {
            "name": "gradual-10",
            "type": "sequential",
            "function": "checkout",
            "variants": {"base": "v1", "new": "v2"},
            "routing": "random",
            "traffic_new_percent": 10,
            "end_conditions": {"min_calls": 100, "min_duration_s": 10},
            "on_failure": "rollback",
        },
        {
            "name": "gradual-50",
            "type": "sequential",
            "function": "checkout",
            "variants": {"base": "v1", "new": "v2"},
            "routing": "random",
            "traffic_new_percent": 50,
            "end_conditions": {"min_calls": 100, "min_duration_s": 10},
            "on_failure": "rollback",
        },
        {
            "name": "gradual-90",
            "type": "sequential",
            "function": "checkout",
            "variants": {"base": "v1", "new": "v2"},
            "routing": "random",
            "traffic_new_percent": 90,
            "end_conditions": {"min_calls": 100, "min_duration_s": 10},
            "on_failure": "rollback",
        },
    ],
}


def make_doc(**overrides: Any) -> dict[str, Any]:
    doc = copy.deepcopy(BASE_DOC)
    doc.update(overrides)
    return doc


@pytest.fixture
def base_doc() -> dict[str, Any]:
    return make_doc()
