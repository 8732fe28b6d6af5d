"""Receding-horizon episode loop: perceive, rebuild the scene graph, filter, plan, act."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .gridworld import (
    FORWARD,
    MAX_TURN,
    REACH_RADIUS_M,
    Cell,
    SimState,
    Verb,
    cell_center,
    magic_interact,
    object_categories,
    position_to_cell,
    sense,
    step_motion,
    turn_left,
    turn_right,
    world_relations,
)
from .language import (
    BackendFault,
    HistoryEntry,
    KeepSet,
    LlmBackend,
    ParseError,
    RobotStatus,
    SubpolicyCall,
    apply_filter,
    build_filter_prompt,
    build_plan_prompt,
    parse_filter_response,
    parse_plan_response,
    serialize_scene,
)
from .mapping import BevMap, Frontier, compute_esdf, cost_field, find_frontiers, integrate_observation, plan_path
from .scenegraph import DEFAULT_LAMBDA, ObjectMemory, SceneGraph, prune_unreachable, update_scene_graph
from .taskspec import EpisodeRecord, TaskSpec, evaluate_goals, observed_flags
from .voronoi import (
    DEFAULT_SPARSIFY_C,
    VoronoiGraph,
    build_door_kernels,
    closest_node,
    extract_gvd,
    separate_regions,
    sparsify,
)

log = logging.getLogger(__name__)

PLACE_RELATION = {"go_to_and_place_inside": "inside", "go_to_and_place_ontop": "ontop"}
VERBS = {
    "go_to_and_open": Verb.OPEN,
    "go_to_and_close": Verb.CLOSE,
    "go_to_and_grasp": Verb.GRASP,
    "go_to_and_place_inside": Verb.PLACE_INSIDE,
    "go_to_and_place_ontop": Verb.PLACE_ONTOP,
}


@dataclass
class AgentConfig:
    max_steps: int = 50
    post_completion_cap: int = 5
    sparsify_c: float = DEFAULT_SPARSIFY_C
    tau: float | None = None
    lam: float = DEFAULT_LAMBDA
    use_filter: bool = True
    refilter_every_step: bool = True
    circle_radius: float = 1.0
    circle_samples: int = 16
    parse_retries: int = 2
    motion_budget: int = 4000
    include_attributes: bool = True
    include_relations: bool = True


@dataclass
class AgentState:
    step: int = 0
    history: list[HistoryEntry] = field(default_factory=list)
    post_completion_steps: int = 0
    done_called: bool = False

    @property
    def failed_actions(self) -> list[HistoryEntry]:
        return [h for h in self.history if not h.success]


class NavigationError(Exception):
    pass


class Episode:
    """Owns the agent-side world model for one episode."""

    def __init__(self, sim: SimState, task: TaskSpec, backend: LlmBackend, config: AgentConfig | None = None):
        self.sim = sim
        self.task = task
        self.backend = backend
        self.config = config or AgentConfig()
        self.res = sim.resolution
        self.bev = BevMap.for_state(sim)
        self.memory = ObjectMemory(self.res)
        self.observed: set[str] = set()
        self.tick = 0
        self.motions = 0
        self.graph = VoronoiGraph()
        self.frontiers: list[Frontier] = []
        self.sg: SceneGraph | None = None
        self.view: SceneGraph = SceneGraph()
        self.keep: KeepSet | None = None
        self.state = AgentState()

    # perception -----------------------------------------------------------

    def observe(self) -> None:
        obs = sense(self.sim)
        self.tick += 1
        self.bev = integrate_observation(self.bev, obs, self.tick)
        self.memory.observe(obs)
        self.observed |= obs.object_ids()
        self.observed |= {d.id for d in obs.visible_doors}

    def rebuild(self) -> SceneGraph:
        esdf = compute_esdf(self.bev)
        graph = sparsify(extract_gvd(esdf, self.bev), self.config.sparsify_c)
        kernels = build_door_kernels(self.bev.doors.values(), self.res)
        self.graph = separate_regions(graph, kernels, self.config.tau, step=self.res)
        costs = cost_field(self.bev.free_mask(), self.sim.robot_cell())
        # frontiers the robot cannot reach are not worth advertising
        self.frontiers = [f for f in find_frontiers(self.bev) if any(np.isfinite(costs[y, x]) for x, y in f.cells)]
        self.sg = update_scene_graph(
            self.sg, self.graph, self.memory, self.sim.robot.position, self.frontiers, self.backend, self.config.lam
        )
        self.view = prune_unreachable(self.sg, self.graph, self.sim.robot.position)
        return self.view

    # motion ---------------------------------------------------------------

    def _motion(self, action) -> bool:
        if self.motions >= self.config.motion_budget:
            raise NavigationError("motion budget exhausted")
        self.motions += 1
        result = step_motion(self.sim, action)
        self.observe()
        return result.success

    def turn_towards(self, point: tuple[float, float]) -> None:
        px, py = self.sim.robot.position
        want = math.atan2(point[1] - py, point[0] - px)
        while True:
            diff = (want - self.sim.robot.heading + math.pi) % (2 * math.pi) - math.pi
            if abs(diff) < 1e-9:
                return
            angle = min(abs(diff), MAX_TURN)
            self._motion(turn_left(angle) if diff > 0 else turn_right(angle))

    def spin(self) -> None:
        """Full in-place turn in maximal increments, sensing after each."""
        turned = 0.0
        while turned < 2 * math.pi - 1e-9:
            self._motion(turn_left(MAX_TURN))
            turned += MAX_TURN

    def go_to(self, goal: Cell) -> None:
        """Follow A* over known free space, replanning as the map fills in."""
        path = None
        blocked = 0
        while self.sim.robot_cell() != goal:
            here = self.sim.robot_cell()
            if path is None or here not in path or not all(self.bev.is_free(c) for c in path[1:]):
                path = plan_path(self.bev, here, goal)
                if path is None:
                    raise NavigationError("no path")
            nxt = path[path.index(here) + 1]
            self.turn_towards(cell_center(nxt, self.res))
            if not self._motion(FORWARD):
                blocked += 1
                path = None
                if blocked > 3:
                    raise NavigationError("blocked")

    def reachable_costs(self) -> np.ndarray:
        return cost_field(self.bev.free_mask(), self.sim.robot_cell())

    def approach_cell(self, target: tuple[float, float]) -> Cell:
        """Closest reachable sample on a circle around ``target``.

        Falls back to any reachable free cell within reach when every circle
        sample is blocked or unknown.
        """
        costs = self.reachable_costs()
        r = self.config.circle_radius
        best: tuple[float, int, Cell] | None = None
        for k in range(self.config.circle_samples):
            a = 2 * math.pi * k / self.config.circle_samples
            cell = position_to_cell((target[0] + r * math.cos(a), target[1] + r * math.sin(a)), self.res)
            if self.bev.is_free(cell) and np.isfinite(costs[cell[1], cell[0]]):
                cand = (float(costs[cell[1], cell[0]]), k, cell)
                if best is None or cand < best:
                    best = cand
        if best is not None:
            return best[2]
        reach = REACH_RADIUS_M - self.res
        cells = np.argwhere(np.isfinite(costs) & self.bev.free_mask())
        fallback = None
        for y, x in cells:
            c = cell_center((int(x), int(y)), self.res)
            if math.hypot(c[0] - target[0], c[1] - target[1]) <= reach:
                cand = (float(costs[y, x]), int(y), int(x))
                if fallback is None or cand < fallback:
                    fallback = cand
        if fallback is None:
            raise NavigationError("no path")
        return (fallback[2], fallback[1])

    # subpolicies ----------------------------------------------------------

    def _lookup(self, call: SubpolicyCall):
        sg = self.view
        rid = sg.resolve_region(call.room) if call.room is not None else None
        if call.room is not None and rid is None:
            return None, None
        obj = None
        if call.obj is not None:
            obj = sg.objects.get(call.obj)
            if obj is None:
                return rid, None
        return rid, obj

    def _translate(self, feedback: str) -> str:
        """Rewrite simulator ids in feedback to the instance ids the planner knows."""
        def sub(m: re.Match) -> str:
            return self.memory.instance_of(m.group(0)) or m.group(0)

        ids = sorted(self.memory.records, key=len, reverse=True)
        if not ids:
            return feedback
        return re.sub("|".join(re.escape(i) for i in ids), sub, feedback)

    def execute(self, call: SubpolicyCall) -> tuple[bool, str]:
        if call.name == "done":
            self.state.done_called = True
            return True, ""
        rid, obj = self._lookup(call)
        if rid is None or (call.obj is not None and obj is None):
            return False, "unknown target"
        try:
            if call.name == "explore":
                return self._explore(rid)
            if call.name == "navigate":
                node = closest_node(self.graph, obj.position)
                if node is None:
                    return False, "no path"
                self.go_to(position_to_cell(self.graph.positions[node], self.res))
                return True, ""
            return self._interact(call, obj)
        except NavigationError as exc:
            return False, str(exc)

    def _explore(self, rid: str) -> tuple[bool, str]:
        mine = [f for f in self.frontiers if f.region_id == rid]
        if not mine:
            return False, "region fully explored"
        costs = self.reachable_costs()
        ranked = sorted(
            (float(costs[f.anchor()[1], f.anchor()[0]]), i, f) for i, f in enumerate(mine)
        )
        ranked = [r for r in ranked if np.isfinite(r[0])]
        if not ranked:
            return False, "no path"
        self.go_to(ranked[0][2].anchor())
        self.spin()
        return True, ""

    def _interact(self, call: SubpolicyCall, obj) -> tuple[bool, str]:
        self.go_to(self.approach_cell(obj.position))
        self.turn_towards(obj.position)
        held = self.memory.held
        result = magic_interact(self.sim, VERBS[call.name], obj.sim_id)
        if result.success:
            if call.name == "go_to_and_grasp":
                self.memory.note_grasp(obj.sim_id)
            elif call.name in PLACE_RELATION:
                self.memory.note_place(held, obj.sim_id, PLACE_RELATION[call.name])
            else:
                self.memory.note_articulation(obj.sim_id, "open" if call.name == "go_to_and_open" else "closed")
        self.observe()
        return result.success, self._translate(result.feedback)

    # planning -------------------------------------------------------------

    def _ask(self, messages, parse, purpose: str):
        last: Exception | None = None
        for _ in range(self.config.parse_retries + 1):
            reply = self.backend.complete(messages, purpose)
            try:
                return parse(reply)
            except ParseError as exc:
                last = exc
                log.info("unparseable %s reply: %s", purpose, exc)
        raise last  # type: ignore[misc]

    def task_view(self) -> SceneGraph:
        if not self.config.use_filter:
            return self.view
        if self.keep is None or self.config.refilter_every_step:
            scene = serialize_scene(self.view, self.config.include_attributes, self.config.include_relations)
            messages = build_filter_prompt(scene, self.task.description)
            try:
                self.keep = self._ask(messages, lambda r: parse_filter_response(r, self.view), "filter")
            except ParseError:
                log.warning("filter failed; planning on the unfiltered scene graph")
                self.keep = None
                return self.view
        return apply_filter(self.view, self.keep)

    def plan(self, feedback: str | None) -> tuple[SubpolicyCall, str]:
        task_sg = self.task_view()
        names = self.view.region_names()
        held = self.memory.held if self.view.held else None
        robot = RobotStatus(names.get(self.view.robot_region, "unknown"), self.view.held, held)
        scene = serialize_scene(task_sg, self.config.include_attributes, self.config.include_relations)
        messages = build_plan_prompt(task_sg, robot, self.task.description, self.state.history, feedback, scene)
        digest = hashlib.sha256(json.dumps(messages, sort_keys=True).encode()).hexdigest()
        try:
            call = self._ask(messages, parse_plan_response, "plan")
        except ParseError as exc:
            raise BackendFault(f"planner reply unparseable after retries: {exc}") from None
        return call, digest

    # loop -----------------------------------------------------------------

    def goal_flags(self) -> list[bool]:
        return evaluate_goals(self.task, world_relations(self.sim), object_categories(self.sim))

    def run(self, log_path: str | Path | None = None) -> EpisodeRecord:
        lines: list[str] = []
        terminated = None
        feedback: str | None = None
        st = self.state
        try:
            self.observe()
            self.spin()
        except NavigationError:
            pass
        while terminated is None:
            satisfied = all(self.goal_flags())
            if satisfied and st.post_completion_steps >= self.config.post_completion_cap:
                terminated = "post_completion_cap"
                break
            if st.step >= self.config.max_steps:
                terminated = "step_cap"
                break
            try:
                # room classification and filtering call the backend too
                self.rebuild()
                robot_room = self.view.region_names().get(self.view.robot_region, "unknown")
                call, digest = self.plan(feedback)
            except BackendFault as exc:
                log.error("episode fault: %s", exc)
                terminated = "fault"
                break
            self.motions = 0
            ok, feedback = self.execute(call)
            st.history.append(HistoryEntry(call, ok, feedback))
            st.step += 1
            st.post_completion_steps = st.post_completion_steps + 1 if satisfied else 0
            lines.append(
                json.dumps(
                    {
                        "step": st.step,
                        "prompt_sha256": digest,
                        "subpolicy": call.name,
                        "args": [a for a in (call.room, call.obj) if a is not None],
                        "success": ok,
                        "feedback": feedback,
                        "satisfied_flags": self.goal_flags(),
                        "robot_room": robot_room,
                    },
                    sort_keys=True,
                )
            )
            if st.done_called:
                terminated = "done_call"
        if log_path is not None:
            Path(log_path).write_text("".join(line + "\n" for line in lines))
        return EpisodeRecord(
            task=self.task.name,
            terminated_by=terminated,
            satisfied=self.goal_flags(),
            observed=observed_flags(self.task, self.observed, object_categories(self.sim)),
            steps=st.step,
            log_path=str(log_path) if log_path is not None else None,
        )


def run_episode(
    sim: SimState,
    task: TaskSpec,
    backend: LlmBackend,
    config: AgentConfig | None = None,
    log_path: str | Path | None = None,
    **record_fields: Any,
) -> EpisodeRecord:
    record = Episode(sim, task, backend, config).run(log_path)
    for key, value in record_fields.items():
        setattr(record, key, value)
    return record
