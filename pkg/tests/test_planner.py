from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from canarytree.errors import EmptyRegion, InvalidLadder
from canarytree.planner import (
    ChildArea,
    LocationInfo,
    derive_child_strategies,
    find_rollout_segment,
    plan_for,
    plan_global_incremental,
    plan_local_sequential,
    plan_regional_incremental,
    plan_regional_sequential,
    rollout_stage_name,
)
from canarytree.strategy import RolloutKind, StageAction, StageType, strategy_from_dict

from conftest import make_doc


def loc(node_id: str, region: str = "eu") -> LocationInfo:
    return LocationInfo(node_id=node_id, region=region)


def area(node_id: str, region: str = "eu", kind: str = "agent") -> ChildArea:
    return ChildArea(node_id=node_id, kind=kind, locations=(loc(node_id, region),))


# --- plans ---------------------------------------------------------------------


def test_global_incremental_equal_percentages():
    plan = plan_global_incremental([loc("a"), loc("b")], [10, 50, 90, 100])
    assert len(plan.steps) == 4
    for step, pct in zip(plan.steps, (10, 50, 90, 100)):
        assert step == {"a": pct, "b": pct}


def test_global_incremental_single_location_matches_local_sequential():
    ladder = [25, 100]
    global_plan = plan_global_incremental([loc("a")], ladder)
    local_plan = plan_local_sequential([loc("a")], ladder)
    assert [dict(s) for s in global_plan.steps] == [dict(s) for s in local_plan.steps]


def test_decreasing_ladder_rejected():
    with pytest.raises(InvalidLadder):
        plan_global_incremental([loc("a")], [50, 10])


def test_ladder_must_end_at_hundred():
    with pytest.raises(InvalidLadder):
        plan_global_incremental([loc("a")], [10, 50])


def test_empty_ladder_rejected():
    with pytest.raises(InvalidLadder):
        plan_local_sequential([loc("a")], [])


def test_local_sequential_enumeration():
    plan = plan_local_sequential([loc("a"), loc("b")], [50, 100])
    assert [dict(s) for s in plan.steps] == [
        {"a": 50.0, "b": 0.0},
        {"a": 100.0, "b": 0.0},
        {"a": 100.0, "b": 50.0},
        {"a": 100.0, "b": 100.0},
    ]


def test_local_sequential_no_locations_is_empty():
    assert plan_local_sequential([], [50, 100]).steps == ()


def test_local_sequential_one_climber_at_a_time():
    plan = plan_local_sequential([loc(f"n{i}") for i in range(4)], [10, 60, 100])
    for step in plan.steps:
        climbing = [n for n, p in step.items() if 0 < p < 100]
        assert len(climbing) <= 1


def test_regional_incremental_outsiders_zero():
    locations = [loc("eu1", "eu"), loc("eu2", "eu"), loc("us1", "us")]
    plan = plan_regional_incremental(locations, "eu", [10, 100])
    for step in plan.steps:
        assert step["us1"] == 0.0
        assert step["eu1"] == step["eu2"] != 0.0


def test_regional_incremental_all_members_reduces_to_global():
    locations = [loc("a"), loc("b")]
    regional = plan_regional_incremental(locations, "eu", [10, 100])
    global_plan = plan_global_incremental(locations, [10, 100])
    assert [dict(s) for s in regional.steps] == [dict(s) for s in global_plan.steps]


def test_empty_region_raises():
    with pytest.raises(EmptyRegion):
        plan_regional_incremental([loc("a", "eu")], "mars", [100])
    with pytest.raises(EmptyRegion):
        plan_regional_sequential([loc("a", "eu")], "mars", [100])


def test_regional_sequential_outsiders_zero_and_exclusive():
    locations = [loc("eu1", "eu"), loc("eu2", "eu"), loc("us1", "us")]
    plan = plan_regional_sequential(locations, "eu", [40, 100])
    for step in plan.steps:
        assert step["us1"] == 0.0
        climbing = [n for n, p in step.items() if 0 < p < 100]
        assert len(climbing) <= 1
    assert plan.steps[-1]["eu1"] == plan.steps[-1]["eu2"] == 100.0


def test_plan_json_serializable():
    plan = plan_global_incremental([loc("a")], [100])
    assert '"kind": "global_incremental"' in plan.to_json()


# --- segment detection -----------------------------------------------------------


def test_find_rollout_segment_trailing_run(base_doc):
    strategy = strategy_from_dict(base_doc)
    assert find_rollout_segment(strategy) == (2, 5)


def test_no_segment_for_single_stage(base_doc):
    base_doc["stages"] = base_doc["stages"][:1]
    assert find_rollout_segment(strategy_from_dict(base_doc)) is None


def test_segment_requires_same_routing(base_doc):
    # A routing change in gradual-10 shortens the trailing run to the last two.
    base_doc["stages"][2]["routing"] = "client_id"
    strategy = strategy_from_dict(base_doc)
    assert find_rollout_segment(strategy) == (3, 5)


# --- derivation ------------------------------------------------------------------


def make_plan_strategy():
    return strategy_from_dict(make_doc())


def test_derive_global_incremental_expands_per_step():
    strategy = make_plan_strategy()
    children = [area("a"), area("b")]
    plan = plan_global_incremental([loc("a"), loc("b")], [10, 50, 90, 100])
    derived = derive_child_strategies(strategy, plan, children, promote_final_step=True)
    for child in ("a", "b"):
        stages = derived[child].stages
        rollout = [s for s in stages if s.plan_step is not None]
        assert [s.traffic_new_percent for s in rollout] == [10, 50, 90, 100]
        assert all(s.stage_type is StageType.WAIT_FOR_SIGNAL for s in rollout)
        assert all(s.auto_end for s in rollout)
        assert [s.name for s in rollout] == [rollout_stage_name(k) for k in range(4)]
        assert rollout[-1].promotion
        assert rollout[-1].on_success is StageAction.ROLLOUT
        assert rollout[-1].end_conditions.min_calls == 0
        # Non-rollout stages pass through unchanged.
        assert stages[0].name == "canary"
        assert stages[1].name == "compare"


def test_derive_elides_unchanged_steps():
    strategy = make_plan_strategy()
    children = [area("a"), area("b")]
    plan = plan_local_sequential([loc("a"), loc("b")], [50, 100])
    derived = derive_child_strategies(strategy, plan, children)
    a_steps = [(s.plan_step, s.traffic_new_percent) for s in derived["a"].stages if s.plan_step is not None]
    b_steps = [(s.plan_step, s.traffic_new_percent) for s in derived["b"].stages if s.plan_step is not None]
    assert a_steps == [(0, 50.0), (1, 100.0)]
    assert b_steps == [(2, 50.0), (3, 100.0)]


def test_derive_rm_child_gets_segment_verbatim():
    strategy = make_plan_strategy()
    child = ChildArea(node_id="mid", kind="rm", locations=(loc("a"), loc("b")))
    plan = plan_global_incremental([loc("a"), loc("b")], [10, 50, 90, 100])
    derived = derive_child_strategies(strategy, plan, [child], promote_final_step=True)
    names = [s.name for s in derived["mid"].stages]
    assert names == ["canary", "compare", "gradual-10", "gradual-50", "gradual-90"]


def test_derived_strategy_survives_the_wire():
    # Derived stages carry plan_step/auto_end/promotion; the serialized form
    # must parse back to an identical object so /release can ship it.
    from canarytree.strategy import parse_strategy, serialize_strategy

    strategy = make_plan_strategy()
    plan = plan_global_incremental([loc("a"), loc("b")], [10, 50, 90, 100])
    derived = derive_child_strategies(strategy, plan, [area("a"), area("b")],
                                      promote_final_step=True)
    for child_strategy in derived.values():
        assert parse_strategy(serialize_strategy(child_strategy)) == child_strategy


def test_derive_omits_uninvolved_children():
    doc = make_doc()
    for stage in doc["stages"]:
        stage["regions"] = ["eu"]
    strategy = strategy_from_dict(doc)
    children = [area("a", region="eu"), area("c", region="us")]
    plan = plan_regional_incremental([loc("a", "eu"), loc("c", "us")], "eu", [10, 100])
    derived = derive_child_strategies(strategy, plan, children)
    assert "a" in derived
    assert "c" not in derived


def test_derive_scopes_regular_stages_by_region():
    doc = make_doc()
    doc["stages"][0]["regions"] = ["cloud"]
    doc["stages"][1]["regions"] = ["edge"]
    strategy = strategy_from_dict(doc)
    children = [area("cl", region="cloud"), area("ed", region="edge")]
    plan = plan_global_incremental([loc("cl", "cloud"), loc("ed", "edge")], [10, 50, 90, 100])
    derived = derive_child_strategies(strategy, plan, children, promote_final_step=True)
    assert [s.name for s in derived["cl"].stages][:1] == ["canary"]
    assert "compare" not in [s.name for s in derived["cl"].stages]
    assert [s.name for s in derived["ed"].stages][0] == "compare"


# --- randomized properties (criterion 6) ---------------------------------------


REGIONS = ["r1", "r2", "r3", "r4"]

locations_strategy = st.integers(min_value=1, max_value=20).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.sampled_from(REGIONS), min_size=n, max_size=n),
    )
)

ladder_strategy = st.lists(
    st.integers(min_value=1, max_value=99), min_size=0, max_size=5, unique=True
).map(lambda body: sorted(body) + [100])

kind_strategy = st.sampled_from(list(RolloutKind))


def reconstruct_plan_steps(plan, derived, node_ids):
    """Oracle: rebuild each step from derived stages plus carry-forward."""
    per_node: dict[str, dict[int, float]] = {}
    for child_id, strat in derived.items():
        for stage in strat.stages:
            if stage.plan_step is not None:
                per_node.setdefault(child_id, {})[stage.plan_step] = stage.traffic_new_percent
    current = {node: 0.0 for node in node_ids}
    steps = []
    for k in range(len(plan.steps)):
        for node in node_ids:
            if k in per_node.get(node, {}):
                current[node] = per_node[node][k]
        steps.append(dict(current))
    return steps


@settings(max_examples=120, deadline=None)
@given(locations_strategy, ladder_strategy, kind_strategy, st.randoms())
def test_plan_properties_randomized(spec, ladder, kind, rnd):
    n, regions = spec
    locations = [loc(f"n{i:02d}", regions[i]) for i in range(n)]
    region = rnd.choice(regions)
    plan = plan_for(kind, locations, ladder, region)

    member_ids = {l.node_id for l in locations if l.region == region}
    for step in plan.steps:
        climbing = [node for node, pct in step.items() if 0 < pct < 100]
        if kind in (RolloutKind.LOCAL_SEQUENTIAL, RolloutKind.REGIONAL_SEQUENTIAL):
            assert len(climbing) <= 1, "sequential plans climb one node at a time"
        if kind in (RolloutKind.GLOBAL_INCREMENTAL, RolloutKind.REGIONAL_INCREMENTAL):
            in_scope = [pct for node, pct in step.items()
                        if kind is RolloutKind.GLOBAL_INCREMENTAL or node in member_ids]
            assert len(set(in_scope)) <= 1, "incremental plans keep percentages uniform"
        if kind in (RolloutKind.REGIONAL_INCREMENTAL, RolloutKind.REGIONAL_SEQUENTIAL):
            for node, pct in step.items():
                if node not in member_ids:
                    assert pct == 0.0, "regional plans never leak outside the region"

    # Monotone exposure and full final coverage.
    previous: dict[str, float] = {}
    for step in plan.steps:
        for node, pct in step.items():
            assert pct >= previous.get(node, 0.0)
            previous[node] = pct
    if plan.steps:
        in_scope = member_ids if kind in (
            RolloutKind.REGIONAL_INCREMENTAL, RolloutKind.REGIONAL_SEQUENTIAL
        ) else {l.node_id for l in locations}
        assert all(plan.steps[-1][node] == 100.0 for node in in_scope)


@settings(max_examples=120, deadline=None)
@given(locations_strategy, ladder_strategy, kind_strategy, st.randoms())
def test_derive_round_trips_to_plan(spec, ladder, kind, rnd):
    n, regions = spec
    locations = [loc(f"n{i:02d}", regions[i]) for i in range(n)]
    region = rnd.choice(regions)
    plan = plan_for(kind, locations, ladder, region)
    strategy = make_plan_strategy()
    children = [area(l.node_id, l.region) for l in locations]
    derived = derive_child_strategies(strategy, plan, children)
    rebuilt = reconstruct_plan_steps(plan, derived, [l.node_id for l in locations])
    assert rebuilt == [dict(s) for s in plan.steps]
