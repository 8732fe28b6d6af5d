from __future__ import annotations

import math

import pytest

from sgplan.agent import AgentConfig, Episode, run_episode
from sgplan.gridworld import REACH_RADIUS_M, load_scene
from sgplan.language import (
    PLAN_MARKER,
    OracleBackend,
    RecordingBackend,
    RulesBackend,
    SubpolicyCall,
)
from sgplan.scenes import bundled_suite
from sgplan.taskspec import parse_task

from .conftest import grid_scene, open_room, place


def suite_entry(name):
    return next(e for e in bundled_suite() if e.name == name)


class Scripted:
    """Replies to plan prompts with ``plan(user_text)``; keeps every plan prompt."""

    kind = "rules"

    def __init__(self, plan):
        self.plan = plan
        self.prompts: list[str] = []

    def complete(self, messages, purpose="plan"):
        if purpose == "classify":
            return "room"
        if not messages[0]["content"].startswith(PLAN_MARKER):
            return ""
        self.prompts.append(messages[1]["content"])
        return self.plan(messages[1]["content"])


def box_task(goal="open(box_1)"):
    return parse_task({"name": "box", "description_template": "open the box", "goal_conditions": [goal]})


def box_room(state="open"):
    return open_room(
        20, 12, [{"id": "box_1", "category": "box", "position": [14, 6], "articulated": True, "articulation_state": state}]
    )


def test_trivial_task_calls_done_first():
    task = box_task()
    record = run_episode(load_scene(box_room("open"), 0), task, RulesBackend([task]))
    assert record.terminated_by == "done_call"
    assert record.steps == 1 and record.success


def test_store_beer_with_rules_backend(tmp_path):
    entry = suite_entry("store_beer")
    task = parse_task(entry.task)
    sim = load_scene(entry.scene(), 0)
    record = run_episode(sim, task, RulesBackend([task]), log_path=tmp_path / "log.jsonl")
    assert record.terminated_by == "done_call" and record.success
    assert record.steps <= 20
    beers = [o for o in sim.objects.values() if o.category == "beer_bottle"]
    assert beers and all(o.contained_in == "fridge_1" for o in beers)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == record.steps


def test_never_done_hits_step_cap():
    backend = Scripted(lambda user: "explore(nowhere)")
    record = run_episode(load_scene(box_room("closed"), 0), box_task(), backend)
    assert record.terminated_by == "step_cap"
    assert record.steps == 50


def test_dithering_after_completion_hits_post_completion_cap(tmp_path):
    backend = Scripted(lambda user: "explore(nowhere)")
    record = run_episode(load_scene(box_room("open"), 0), box_task(), backend, log_path=tmp_path / "l.jsonl")
    assert record.terminated_by == "post_completion_cap"
    assert record.steps == 5
    assert record.complete and not record.success


def test_failed_calls_stay_in_every_later_prompt():
    replies = iter(["go_to_and_grasp(room, unicorn_A)"] + ["explore(room)"] * 10)
    backend = Scripted(lambda user: next(replies))
    run_episode(load_scene(box_room("closed"), 0), box_task(), backend, AgentConfig(max_steps=6))
    assert len(backend.prompts) == 6
    assert "Failed actions:\n  - none" in backend.prompts[0]
    for prompt in backend.prompts[1:]:
        failed = prompt.split("Failed actions:")[1]
        assert "go_to_and_grasp(room, unicorn_A) -> failed: unknown target" in failed


def _episode(spec, cell, heading, task=None):
    sim = place(load_scene(spec, 0), cell, heading)
    task = task or box_task()
    ep = Episode(sim, task, RulesBackend([task]), AgentConfig(use_filter=False))
    ep.observe()
    ep.spin()
    ep.rebuild()
    return ep


def test_grasp_three_meters_away():
    spec = open_room(60, 10, [{"id": "ball_1", "category": "ball", "position": [45, 5]}])
    ep = _episode(spec, (5, 5), 0.0)
    room = ep.view.region_names()[ep.view.robot_region]
    ok, feedback = ep.execute(SubpolicyCall("go_to_and_grasp", room, "ball_A"))
    assert ok, feedback
    assert ep.sim.robot.gripper == "ball_1"
    ball = (45.5 * 0.075, 5.5 * 0.075)
    assert math.dist(ep.sim.robot.position, ball) <= REACH_RADIUS_M


def test_explore_fully_seen_room():
    ep = _episode(box_room(), (10, 6), 0.0)
    assert ep.frontiers == []
    room = ep.view.region_names()[ep.view.robot_region]
    assert ep.execute(SubpolicyCall("explore", room)) == (False, "region fully explored")
    assert ep.execute(SubpolicyCall("explore", "attic")) == (False, "unknown target")


def window_scene():
    # furniture row 5 is see-through but impassable; a closed door sits in it
    rows = ["#" * 30] + ["#" + "." * 28 + "#" for _ in range(18)] + ["#" * 30]
    rows[5] = "#" + "F" * 12 + "DDD" + "F" * 13 + "#"
    return grid_scene(
        rows,
        objects=[{"id": "ball_1", "category": "ball", "position": [20, 6]}],
        doors=[{"id": "door_1", "bbox": [13, 5, 15, 5], "state": "closed"}],
    )


def test_navigate_behind_closed_door_then_open_it():
    ep = _episode(window_scene(), (14, 2), math.pi / 2)
    assert "ball_A" in ep.view.objects
    room = ep.view.region_names()[ep.view.objects["ball_A"].region_id]
    call = SubpolicyCall("navigate", room, "ball_A")
    assert ep.execute(call) == (False, "no path")
    door_room = ep.view.region_names()[ep.view.objects["door_A"].region_id]
    ok, feedback = ep.execute(SubpolicyCall("go_to_and_open", door_room, "door_A"))
    assert ok, feedback
    ep.rebuild()
    room = ep.view.region_names()[ep.view.objects["ball_A"].region_id]
    ok, feedback = ep.execute(SubpolicyCall("navigate", room, "ball_A"))
    assert ok, feedback
    assert ep.sim.robot_cell()[1] > 5


def test_history_matches_step_counter():
    task = box_task()
    ep = Episode(load_scene(box_room("closed"), 0), task, RulesBackend([task]))
    record = ep.run()
    assert record.success
    assert len(ep.state.history) == ep.state.step == record.steps
    assert all(not h.success for h in ep.state.failed_actions)


@pytest.mark.parametrize("name", ["apple_to_table", "close_fridge"])
def test_oracle_replay_reproduces_episode(tmp_path, name):
    entry = suite_entry(name)
    task = parse_task(entry.task)
    recorder = RecordingBackend(RulesBackend([task]))
    first = run_episode(load_scene(entry.scene(), 0), task, recorder, log_path=tmp_path / "a.jsonl")
    recorder.write(tmp_path / "t.jsonl")
    oracle = OracleBackend(path=tmp_path / "t.jsonl")
    second = run_episode(load_scene(entry.scene(), 0), task, oracle, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    first.log_path = second.log_path = None
    assert first == second
    assert first.success


def test_backend_fault_ends_episode():
    task = box_task()
    record = run_episode(load_scene(box_room("closed"), 0), task, OracleBackend({}))
    assert record.terminated_by == "fault" and record.steps == 0


def test_unparseable_planner_is_a_fault():
    backend = Scripted(lambda user: "I would rather not.")
    record = run_episode(load_scene(box_room("closed"), 0), box_task(), backend)
    assert record.terminated_by == "fault"
    assert len(backend.prompts) == 3  # first attempt plus two retries
