from __future__ import annotations

import json
from fractions import Fraction

import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from sgplan.taskspec import (
    EpisodeRecord,
    GoalCondition,
    TaskParseError,
    compute_metrics,
    evaluate_goals,
    observed_flags,
    parse_condition,
    parse_task,
)

STORE_BEER = {
    "name": "store_beer",
    "description_template": "store all beer bottles in $electric_refrigerator.n.01_1",
    "bindings": {"electric_refrigerator.n.01_1": "fridge_1"},
    "goal_conditions": ["forall beer_bottle inside $electric_refrigerator.n.01_1"],
}

BEERS = {"beer_bottle_1": "beer_bottle", "beer_bottle_2": "beer_bottle", "beer_bottle_3": "beer_bottle",
         "fridge_1": "fridge", "cabinet_1": "cabinet"}


def test_store_beer_fixture():
    task = parse_task(json.dumps(STORE_BEER))
    assert task.goal_conditions == [GoalCondition("inside", ("fridge_1",), category="beer_bottle")]
    assert task.description == "store all beer bottles in fridge_1"
    assert task.relevant_categories() == {"beer_bottle"}
    assert task.relevant_categories(BEERS) == {"beer_bottle", "fridge"}
    assert parse_task(STORE_BEER, BEERS).goal_conditions == task.goal_conditions


def test_arity_error():
    with pytest.raises(TaskParseError, match="arity"):
        parse_condition("inside(apple)", {})


def test_unbound_variable_is_named():
    data = dict(STORE_BEER, description_template="put $x away")
    with pytest.raises(TaskParseError, match=r"\$x"):
        parse_task(json.dumps(data))
    with pytest.raises(TaskParseError, match=r"\$y"):
        parse_condition("open($y)", {})


def test_unknown_predicate_and_position():
    source = json.dumps({"name": "t", "description_template": "d", "goal_conditions": ["grab(apple_1)"]}, indent=1)
    with pytest.raises(TaskParseError) as err:
        parse_task(source)
    assert "unknown predicate" in err.value.message
    line = source.splitlines()[err.value.line - 1]
    assert line[err.value.column - 1 :].startswith("grab")


def test_scene_validation():
    with pytest.raises(TaskParseError, match="unknown object"):
        parse_task({"name": "t", "description_template": "d", "goal_conditions": ["open(oven_9)"]}, BEERS)
    with pytest.raises(TaskParseError, match="unknown category"):
        parse_task({"name": "t", "description_template": "d", "goal_conditions": ["forall mug inside fridge_1"]},
                   BEERS)


def test_forall_evaluation():
    task = parse_task(STORE_BEER)
    two = {("inside", "beer_bottle_1", "fridge_1"), ("inside", "beer_bottle_2", "fridge_1")}
    assert evaluate_goals(task, two, BEERS) == [False]
    three = two | {("inside", "beer_bottle_3", "fridge_1")}
    assert evaluate_goals(task, three, BEERS) == [True]


def test_ground_open_on_closed_cabinet():
    task = parse_task({"name": "t", "description_template": "d", "goal_conditions": ["open(cabinet_1)"]})
    assert evaluate_goals(task, {("closed", "cabinet_1")}, BEERS) == [False]
    assert evaluate_goals(task, {("open", "cabinet_1")}, BEERS) == [True]


def test_observed_flags_need_every_referenced_object():
    task = parse_task(STORE_BEER)
    assert observed_flags(task, ["fridge_1", "beer_bottle_1"], BEERS) == [False]
    assert observed_flags(task, list(BEERS), BEERS) == [True]


def rec(satisfied, observed=None, term="done_call", task="t"):
    return EpisodeRecord(task, term, list(satisfied), list(observed or [True] * len(satisfied)), 3)


def test_metrics_examples():
    r = compute_metrics([rec([True, True, False, False])])
    assert (r.sr, r.ttc, r.tp) == (0, 0, Fraction(1, 2))
    r = compute_metrics([rec([True, True], term="step_cap")])
    assert (r.sr, r.ttc) == (0, 1)
    r = compute_metrics([rec([True, True, False, False], [True, True, False, False])])
    assert r.tp == Fraction(1, 2) and r.rtp == 1
    assert r.rtp_episodes == 1


def test_rtp_excludes_episodes_without_eligible_conditions():
    r = compute_metrics([rec([False], [False]), rec([True, False], [True, True])])
    assert r.rtp == Fraction(1, 2) and r.rtp_episodes == 1
    assert compute_metrics([rec([True], [False])]).rtp is None


def test_metrics_errors_and_record_checks():
    with pytest.raises(ValueError):
        compute_metrics([])
    with pytest.raises(ValueError, match="differ in length"):
        EpisodeRecord("t", "done_call", [True], [True, False], 1)
    with pytest.raises(ValueError):
        EpisodeRecord("t", "timeout", [True], [True], 1)


def test_metrics_text_and_json():
    r = compute_metrics([rec([True]), rec([False], term="step_cap")])
    text = r.to_text()
    assert "SR" in text and "50.0%" in text and "1/2" in text
    assert r.to_dict()["SR"] == {"value": 0.5, "exact": "1/2"}
    record = rec([True, False], [False, True], term="post_completion_cap")
    assert EpisodeRecord.from_dict(json.loads(json.dumps(record.to_dict()))) == record


RECORD = st.builds(
    lambda flags, term: EpisodeRecord("t", term, [f[0] for f in flags], [f[1] for f in flags], 1),
    st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=6),
    st.sampled_from(["done_call", "step_cap", "post_completion_cap", "fault"]),
)


@given(st.lists(RECORD, min_size=1, max_size=12))
def test_metric_invariants(records):
    r = compute_metrics(records)
    assert 0 <= r.sr <= r.ttc <= 1
    assert 0 <= r.tp <= 1
    assert compute_metrics(list(reversed(records))).to_dict()["TP"] == r.to_dict()["TP"]


@given(st.lists(RECORD, min_size=1, max_size=12))
def test_rtp_at_least_tp_when_satisfied_are_eligible(records):
    records = [
        EpisodeRecord(x.task, x.terminated_by, x.satisfied, [s or o for s, o in zip(x.satisfied, x.observed)], 1)
        for x in records
    ]
    assume(all(any(x.observed) for x in records))
    r = compute_metrics(records)
    assert r.rtp >= r.tp


IDS = st.sampled_from(["apple_1", "bag_1", "fridge_1", "cabinet_1"])
CONDITION = st.one_of(
    st.builds(lambda a, b: f"inside({a}, {b})", IDS, IDS),
    st.builds(lambda a, b: f"ontop({a}, {b})", IDS, IDS),
    st.builds(lambda a: f"open({a})", IDS),
    st.builds(lambda a: f"closed({a})", IDS),
    st.builds(lambda c, p, t: f"forall {c} {p} {t}", st.sampled_from(["apple", "beer_bottle"]),
              st.sampled_from(["inside", "ontop"]), IDS),
)


@given(CONDITION)
def test_parse_serialize_round_trip(text):
    cond = parse_condition(text, {})
    assert parse_condition(cond.serialize(), {}) == cond


ATOM = st.one_of(
    st.tuples(st.sampled_from(["inside", "ontop"]), IDS, IDS),
    st.tuples(st.sampled_from(["open", "closed"]), IDS),
)


@given(CONDITION, st.frozensets(ATOM, max_size=8), ATOM)
def test_positive_atoms_are_monotone(text, atoms, extra):
    cond = parse_condition(text, {})
    assume(extra[0] != "closed")
    task = parse_task({"name": "t", "description_template": "d", "goal_conditions": [text]})
    cats = {"apple_1": "apple", "bag_1": "bag", "fridge_1": "fridge", "cabinet_1": "cabinet"}
    if evaluate_goals(task, atoms, cats)[0] and cond.pred == extra[0]:
        assert evaluate_goals(task, atoms | {extra}, cats)[0]
