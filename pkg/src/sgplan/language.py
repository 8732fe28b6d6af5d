"""Scene serialisation, prompts, response parsing and language-model backends."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import httpx

from .scenegraph import (
    ROOM_VOCABULARY,
    SceneGraph,
    keyword_room_label,
    region_sort_key,
)
from .taskspec import GoalCondition, TaskSpec

log = logging.getLogger(__name__)

Message = dict[str, str]

SUBPOLICY_ARITY = {
    "explore": 1,
    "navigate": 2,
    "go_to_and_open": 2,
    "go_to_and_close": 2,
    "go_to_and_grasp": 2,
    "go_to_and_place_inside": 2,
    "go_to_and_place_ontop": 2,
    "done": 0,
}

SKILL_API = """\
explore(room): go to the closest unexplored area of the room and look around.
navigate(room, object): move next to the object.
go_to_and_open(room, object): move to the object and open it. The gripper must be empty.
go_to_and_close(room, object): move to the object and close it. The gripper must be empty.
go_to_and_grasp(room, object): move to the object and pick it up. The gripper must be empty.
go_to_and_place_inside(room, object): move to the object and put the held object inside it. Containers that open must be open first.
go_to_and_place_ontop(room, object): move to the object and put the held object on top of it.
done(): finish the task. Call it once every part of the task is achieved."""

FILTER_MARKER = "You select the parts of a scene that matter for a household robot task."
PLAN_MARKER = "You are the high-level planner of a mobile household robot."
UNEXPLORED = "unexplored area"


class ParseError(ValueError):
    """A reply that does not follow the expected format; callers retry."""


class BackendFault(RuntimeError):
    """A backend could not produce a reply at all."""


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scene text


@dataclass
class RegionSection:
    region_id: str
    name: str
    lines: list[str]
    unexplored: bool


@dataclass
class ScenePrompt:
    sections: list[RegionSection]

    @property
    def text(self) -> str:
        out = []
        for sec in self.sections:
            out.append(f"{sec.name}:")
            out.extend(f"  - {line}" for line in sec.lines)
            if sec.unexplored:
                out.append(f"  - {UNEXPLORED}")
        return "\n".join(out)


def _render_attributes(attrs: Mapping[str, Any]) -> str:
    parts = []
    if "state" in attrs:
        parts.append(str(attrs["state"]))
    for key in sorted(attrs):
        if key in ("state", "ref"):
            continue
        value = attrs[key]
        parts.append(key if value is True else f"{key}={value}")
    if "ref" in attrs:
        parts.append(f"ref={attrs['ref']}")
    return ", ".join(parts)


def serialize_scene(sg: SceneGraph, include_attributes: bool = True, include_relations: bool = True) -> ScenePrompt:
    names = sg.region_names()
    sections = []
    for rid in sorted(sg.regions, key=region_sort_key):
        region = sg.regions[rid]
        lines = []
        for obj in sg.objects_in(rid):
            line = obj.instance_id
            if include_attributes and obj.attributes:
                line += f" [{_render_attributes(obj.attributes)}]"
            if include_relations and obj.relations:
                line += " (" + "; ".join(f"{p} {t}" for p, t in obj.relations) + ")"
            lines.append(line)
        sections.append(RegionSection(rid, names[rid], lines, region.frontier_count > 0))
    return ScenePrompt(sections)


_OBJ_LINE = re.compile(r"^(?P<id>[\w.\-]+)(?: \[(?P<attrs>[^\]]*)\])?(?: \((?P<rels>[^)]*)\))?$")


@dataclass
class SceneObjectText:
    id: str
    region: str
    attributes: dict[str, Any]
    relations: list[tuple[str, str]]

    @property
    def category(self) -> str:
        return self.id.rsplit("_", 1)[0]

    @property
    def state(self) -> str | None:
        return self.attributes.get("state")

    @property
    def ref(self) -> str | None:
        return self.attributes.get("ref")


@dataclass
class SceneText:
    regions: list[str]
    objects: dict[str, SceneObjectText]
    unexplored: list[str]


def parse_scene_text(text: str) -> SceneText:
    """Inverse of :func:`serialize_scene` for consumers of the prompt text."""
    regions: list[str] = []
    objects: dict[str, SceneObjectText] = {}
    unexplored: list[str] = []
    current = None
    for raw in text.splitlines():
        if not raw.strip():
            continue
        if not raw.startswith("  - ") and raw.endswith(":"):
            current = raw[:-1]
            regions.append(current)
            continue
        if current is None or not raw.startswith("  - "):
            continue
        body = raw[4:]
        if body == UNEXPLORED:
            unexplored.append(current)
            continue
        m = _OBJ_LINE.match(body)
        if not m:
            continue
        attrs: dict[str, Any] = {}
        for part in filter(None, (p.strip() for p in (m.group("attrs") or "").split(","))):
            if "=" in part:
                k, v = part.split("=", 1)
                attrs[k] = v
            elif part in ("open", "closed"):
                attrs["state"] = part
            else:
                attrs[part] = True
        rels = []
        for part in filter(None, (p.strip() for p in (m.group("rels") or "").split(";"))):
            pred, _, target = part.partition(" ")
            rels.append((pred, target))
        objects[m.group("id")] = SceneObjectText(m.group("id"), current, attrs, rels)
    return SceneText(regions, objects, unexplored)


# ---------------------------------------------------------------------------
# filtering


def build_filter_prompt(scene: ScenePrompt, task: str) -> list[Message]:
    if not task or not task.strip():
        raise ValueError("task text must not be empty")
    system = (
        f"{FILTER_MARKER} The robot has only explored part of the building.\n"
        "Remove every object that the robot does not need to complete the task and that gives no hint "
        "about where the needed objects could be found. Keep objects that may lead to unexplored space "
        "or hide other objects, such as doors and closed containers.\n"
        "Answer with one line per room you keep, formatted as\n"
        "<room name>: <object id>, <object id>, ...\n"
        "A room may be listed without objects to keep it for exploration. Write nothing else."
    )
    user = f"Task: {task}\n\nScene:\n{scene.text}\n\nRelevant rooms and objects:"
    return [{"role": "system", "content": system}, {"role": "user", "content": user}]


@dataclass
class KeepSet:
    regions: set[str] = field(default_factory=set)
    objects: set[str] = field(default_factory=set)
    dropped: list[str] = field(default_factory=list)


_FILTER_LINE = re.compile(r"^\s*(?:[-*]\s*)?([^:]+?)\s*:\s*(.*?)\s*$")


def parse_filter_response(reply: str, sg: SceneGraph) -> KeepSet:
    """Strict ``room: id, id`` lines; unknown ids are dropped and logged."""
    keep = KeepSet()
    matched = False
    for line in reply.splitlines():
        m = _FILTER_LINE.match(line)
        if not m:
            continue
        rid = sg.resolve_region(m.group(1).strip("*`'\" "))
        if rid is None:
            continue
        matched = True
        keep.regions.add(rid)
        for tok in m.group(2).split(","):
            tok = tok.strip().strip("`'\"*[]. ")
            if not tok:
                continue
            if tok in sg.objects:
                keep.objects.add(tok)
                keep.regions.add(sg.objects[tok].region_id)
            else:
                keep.dropped.append(tok)
                log.info("filter reply names unknown object %r; dropped", tok)
    if not matched:
        raise ParseError("filter reply lists no known room")
    return keep


def apply_filter(sg: SceneGraph, keep: KeepSet) -> SceneGraph:
    """Induced sub-graph; regions with unexplored area and the robot's region always stay."""
    regions = set(keep.regions)
    regions |= {rid for rid, r in sg.regions.items() if r.frontier_count > 0}
    if sg.robot_region is not None:
        regions.add(sg.robot_region)
    objects = {k: v for k, v in sg.objects.items() if k in keep.objects}
    regions |= {o.region_id for o in objects.values()}
    return SceneGraph(
        regions={k: v for k, v in sg.regions.items() if k in regions},
        objects=objects,
        robot_region=sg.robot_region,
        held=sg.held,
        next_region=sg.next_region,
        region_positions=sg.region_positions,
        label_cache=sg.label_cache,
        display_names=sg.region_names(),
    )


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class SubpolicyCall:
    name: str
    room: str | None = None
    obj: str | None = None

    def render(self) -> str:
        args = [a for a in (self.room, self.obj) if a is not None]
        return f"{self.name}({', '.join(args)})"


@dataclass
class HistoryEntry:
    call: SubpolicyCall
    success: bool
    feedback: str = ""

    def render(self) -> str:
        status = "success" if self.success else "failed"
        text = f"{self.call.render()} -> {status}"
        return f"{text}: {self.feedback}" if self.feedback else text


@dataclass
class RobotStatus:
    room: str
    holding: str | None = None
    holding_ref: str | None = None


def build_plan_prompt(
    scene_task: SceneGraph,
    robot: RobotStatus,
    task: str,
    history: Sequence[HistoryEntry] = (),
    feedback: str | None = None,
    scene: ScenePrompt | None = None,
) -> list[Message]:
    scene = scene or serialize_scene(scene_task)
    system = (
        f"{PLAN_MARKER} Pick the single next skill to run.\n"
        f"Skills:\n{SKILL_API}\n"
        "Use room names and object ids exactly as they appear in the scene. "
        "You may reason briefly, but end your reply with exactly one skill call, for example "
        "go_to_and_grasp(kitchen, apple_A)."
    )
    gripper = f"holding {robot.holding}" if robot.holding else "empty"
    if robot.holding and robot.holding_ref:
        gripper += f" [ref={robot.holding_ref}]"
    recent = list(history)[-5:]
    failed = [h for h in history if not h.success]
    lines = [f"Task: {task}", "", "Scene:", scene.text, "", f"Robot: in {robot.room}; gripper {gripper}"]
    lines.append("Previous actions:")
    lines.extend(f"  - {h.render()}" for h in recent) if recent else lines.append("  - none")
    lines.append("Failed actions:")
    lines.extend(f"  - {h.render()}" for h in failed) if failed else lines.append("  - none")
    lines.append(f"Last feedback: {feedback or 'none'}")
    lines.append("Next skill:")
    return [{"role": "system", "content": system}, {"role": "user", "content": "\n".join(lines)}]


_CALL = re.compile(r"\b(" + "|".join(sorted(SUBPOLICY_ARITY, key=len, reverse=True)) + r")\s*\(([^()]*)\)")


def parse_plan_response(reply: str) -> SubpolicyCall:
    """The last ``name(args)`` match in the reply, checked against the arity table."""
    matches = list(_CALL.finditer(reply or ""))
    if not matches:
        raise ParseError("no skill call found")
    m = matches[-1]
    name = m.group(1)
    args = [a.strip().strip("'\"`") for a in m.group(2).split(",")] if m.group(2).strip() else []
    if any(not a for a in args) or len(args) != SUBPOLICY_ARITY[name]:
        raise ParseError(f"{name} takes {SUBPOLICY_ARITY[name]} argument(s), got {len(args)}")
    return SubpolicyCall(name, *args)


# ---------------------------------------------------------------------------
# backends


def request_hash(messages: Sequence[Message]) -> str:
    canon = json.dumps(list(messages), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canon.encode()).hexdigest()


class LlmBackend(Protocol):
    kind: str

    def complete(self, messages: list[Message], purpose: str = "plan") -> str: ...


def _user_text(messages: Sequence[Message]) -> str:
    return "\n".join(m["content"] for m in messages if m["role"] == "user")


def _system_text(messages: Sequence[Message]) -> str:
    return "\n".join(m["content"] for m in messages if m["role"] == "system")


def _field(text: str, label: str) -> str:
    m = re.search(rf"^{re.escape(label)} (.*)$", text, re.M)
    return m.group(1) if m else ""


def _scene_block(text: str) -> str:
    m = re.search(r"^Scene:\n(.*?)\n\n", text, re.S | re.M)
    return m.group(1) if m else ""


class RulesBackend:
    """Deterministic stand-in for a language model.

    Filtering keeps objects whose category is mentioned by the task text or
    its goal conditions, plus doors and the containers named by the goals.
    Planning runs a greedy achiever over the scene text in the prompt.
    The goal conditions come from the task registry, matched on the task
    text quoted in the prompt.
    """

    kind = "rules"

    def __init__(self, tasks: Iterable[TaskSpec] = ()):
        self.tasks = list(tasks)

    def _task_for(self, text: str) -> TaskSpec | None:
        task_line = _field(text, "Task:")
        return next((t for t in self.tasks if t.description == task_line), None)

    def complete(self, messages: list[Message], purpose: str = "plan") -> str:
        system = _system_text(messages)
        user = _user_text(messages)
        if purpose == "classify" or "Objects:" in user and "Room label:" in user:
            cats = [c.strip() for c in _field(user, "Objects:").split(",") if c.strip()]
            return keyword_room_label(cats)
        task = self._task_for(user)
        scene = parse_scene_text(_scene_block(user))
        if system.startswith(FILTER_MARKER):
            return rules_filter(scene, _field(user, "Task:"), task)
        if system.startswith(PLAN_MARKER):
            robot = _field(user, "Robot:")
            m = re.match(r"in (.*); gripper (?:holding (\S+)(?: \[ref=([^\]]+)\])?|empty)", robot)
            room, holding, held_ref = (m.group(1), m.group(2), m.group(3)) if m else ("", None, None)
            failed = re.findall(r"^  - (\w+\([^)]*\)) -> failed", user.split("Failed actions:")[-1], re.M)
            if task is None:
                return "done()"
            return rules_plan(task, scene, room, holding, failed, held_ref).render()
        return ""


def _mentions(text: str, category: str) -> bool:
    words = category.replace("_", " ")
    return words in text or category in text


def rules_filter(scene: SceneText, task_text: str, task: TaskSpec | None) -> str:
    text = task_text.lower()
    relevant_cats: set[str] = set()
    refs: set[str] = set()
    if task is not None:
        relevant_cats |= task.relevant_categories()
        refs = task.referenced_ids()
    keep: dict[str, list[str]] = {r: [] for r in scene.regions}
    for obj in scene.objects.values():
        if (
            obj.category == "door"
            or obj.category in relevant_cats
            or _mentions(text, obj.category)
            or (obj.ref is not None and obj.ref in refs)
        ):
            keep[obj.region].append(obj.id)
    lines = [f"{r}: {', '.join(ids)}" for r, ids in keep.items() if ids or r in scene.unexplored]
    if not lines and scene.regions:
        lines = [f"{scene.regions[0]}:"]
    return "\n".join(lines)


def rules_plan(
    task: TaskSpec,
    scene: SceneText,
    room: str,
    holding: str | None,
    failed: Sequence[str] = (),
    held_ref: str | None = None,
) -> SubpolicyCall:
    """Greedy achiever: satisfy one goal at a time, exploring when something is missing."""
    by_ref = {o.ref: o for o in scene.objects.values() if o.ref}
    objects = scene.objects
    fail_counts: dict[str, int] = {}
    for f in failed:
        fail_counts[f] = fail_counts.get(f, 0) + 1

    def ok(call: SubpolicyCall) -> bool:
        return fail_counts.get(call.render(), 0) < 2

    def related(obj_id: str, pred: str, target: str) -> bool:
        return obj_id in objects and (pred, target) in objects[obj_id].relations

    moves: list[tuple[str, str, str]] = []  # (object id, pred, target ref)
    toggles: list[tuple[str, str]] = []  # (object id, wanted state)
    missing: set[str] = set()
    exhaustive = False
    for g in task.goal_conditions:
        if g.pred in ("open", "closed"):
            targets = [a for a in g.args] if not g.is_forall else [o.ref for o in objects.values() if o.category == g.category]
            for ref in targets:
                obj = by_ref.get(ref)
                if obj is None:
                    missing.add(ref)
                elif obj.state != g.pred:
                    toggles.append((obj.id, g.pred))
            exhaustive |= g.is_forall
            continue
        target_ref = g.args[-1]
        target = by_ref.get(target_ref)
        if target is None:
            missing.add(target_ref)
        if g.is_forall:
            exhaustive = True
            members = [o for o in objects.values() if o.category == g.category]
            if holding and holding.rsplit("_", 1)[0] == g.category:
                moves.append((holding, g.pred, target_ref))
        else:
            src = by_ref.get(g.args[0])
            members = [src] if src is not None else []
            if src is None:
                if holding and held_ref == g.args[0]:
                    moves.append((holding, g.pred, target_ref))
                else:
                    missing.add(g.args[0])
        for obj in members:
            if target is None or not related(obj.id, g.pred, target.id):
                moves.append((obj.id, g.pred, target_ref))

    def in_room_first(ids: Sequence[str]) -> list[str]:
        return sorted(ids, key=lambda i: (objects[i].region != room, scene.regions.index(objects[i].region)))

    # holding something: put it where it belongs
    if holding:
        for obj_id, pred, target_ref in moves:
            if obj_id != holding:
                continue
            target = by_ref.get(target_ref)
            if target is None:
                break
            if pred == "inside" and target.state == "closed":
                call = SubpolicyCall("go_to_and_place_ontop", target.region, target.id)
            else:
                call = SubpolicyCall(f"go_to_and_place_{pred}", target.region, target.id)
            if ok(call):
                return call
        else:
            surfaces = [o for o in objects.values() if o.region == room and o.id != holding and o.category != "door"]
            if surfaces:
                return SubpolicyCall("go_to_and_place_ontop", room, surfaces[0].id)

    if not holding:
        for obj_id in in_room_first([t[0] for t in toggles]):
            want = dict(toggles)[obj_id]
            call = SubpolicyCall("go_to_and_open" if want == "open" else "go_to_and_close", objects[obj_id].region, obj_id)
            if ok(call):
                return call
        movable = [m for m in moves if m[0] in objects and m[2] in by_ref]
        for obj_id, pred, target_ref in movable:
            target = by_ref[target_ref]
            if pred == "inside" and target.state == "closed":
                call = SubpolicyCall("go_to_and_open", target.region, target.id)
                if ok(call):
                    return call
        order = in_room_first(list(dict.fromkeys(m[0] for m in movable)))
        for obj_id in order:
            obj = objects[obj_id]
            container = next((objects[t] for p, t in obj.relations if p == "inside" and t in objects), None)
            if container is not None and container.state == "closed":
                call = SubpolicyCall("go_to_and_open", container.region, container.id)
            else:
                call = SubpolicyCall("go_to_and_grasp", obj.region, obj_id)
            if ok(call):
                return call

    # search
    if missing or exhaustive or any(m[2] not in by_ref for m in moves):
        regions = sorted(scene.unexplored, key=lambda r: (r != room, scene.regions.index(r)))
        for region in regions:
            call = SubpolicyCall("explore", region)
            if ok(call):
                return call
        if missing and not holding:
            hide = [o for o in objects.values() if o.category != "door" and o.state == "closed"]
            for obj in sorted(hide, key=lambda o: (o.region != room, o.id)):
                call = SubpolicyCall("go_to_and_open", obj.region, obj.id)
                if ok(call) and call.render() not in failed:
                    return call
        if (missing or exhaustive or moves) and not holding:
            doors = [o for o in objects.values() if o.category == "door" and o.state == "closed"]
            for obj in sorted(doors, key=lambda o: (o.region != room, o.id)):
                call = SubpolicyCall("go_to_and_open", obj.region, obj.id)
                if ok(call):
                    return call
    return SubpolicyCall("done")


class OracleBackend:
    """Replays recorded replies keyed by the request hash; never touches the network."""

    kind = "oracle_script"

    def __init__(self, entries: Mapping[str, str] | None = None, path: str | Path | None = None):
        self.replies: dict[str, str] = dict(entries or {})
        if path is not None:
            for line in Path(path).read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self.replies[rec["request_hash"]] = rec["reply"]

    def complete(self, messages: list[Message], purpose: str = "plan") -> str:
        key = request_hash(messages)
        try:
            return self.replies[key]
        except KeyError:
            raise BackendFault(f"oracle transcript has no reply for request {key}") from None


class RecordingBackend:
    """Wraps a backend and keeps a transcript that :class:`OracleBackend` can replay."""

    def __init__(self, inner: LlmBackend):
        self.inner = inner
        self.kind = inner.kind
        self.entries: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, messages: list[Message], purpose: str = "plan") -> str:
        reply = self.inner.complete(messages, purpose)
        with self._lock:
            self.entries[request_hash(messages)] = reply
        return reply

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for key in sorted(self.entries):
                fh.write(json.dumps({"request_hash": key, "reply": self.entries[key]}) + "\n")


class HttpBackend:
    """OpenAI-compatible chat-completions client with bounded exponential backoff."""

    kind = "http"

    def __init__(
        self,
        base_url: str,
        api_key: str,
        model: str,
        aux_model: str | None = None,
        temperature: float = 0.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        if not api_key:
            raise ConfigError("http backend needs an API key (LLM_API_KEY)")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.aux_model = aux_model or model
        self.temperature = temperature
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = httpx.Client(
            timeout=timeout, transport=transport, headers={"Authorization": f"Bearer {api_key}"}
        )
        self.calls = 0

    @classmethod
    def from_env(cls, **kwargs: Any) -> "HttpBackend":
        key = os.environ.get("LLM_API_KEY", "")
        if not key:
            raise ConfigError("LLM_API_KEY is not set")
        return cls(
            base_url=os.environ.get("LLM_BASE_URL", "https://api.openai.com/v1"),
            api_key=key,
            model=os.environ.get("LLM_MODEL", "gpt-4o"),
            aux_model=os.environ.get("LLM_MODEL_AUX") or None,
            **kwargs,
        )

    def complete(self, messages: list[Message], purpose: str = "plan") -> str:
        body = {
            "model": self.aux_model if purpose == "classify" else self.model,
            "messages": list(messages),
            "temperature": self.temperature,
        }
        last = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            self.calls += 1
            try:
                resp = self.client.post(self.url, json=body)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BackendFault(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"] or ""
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise BackendFault(f"malformed chat-completions response: {exc}") from None
        raise BackendFault(f"giving up after {self.max_retries + 1} attempts: {last}")


def make_backend(
    kind: str,
    tasks: Iterable[TaskSpec] = (),
    transcript: str | Path | None = None,
    **http_kwargs: Any,
) -> LlmBackend:
    if kind == "rules":
        return RulesBackend(tasks)
    if kind in ("oracle", "oracle_script"):
        if transcript is None:
            raise ConfigError("oracle backend needs a transcript path")
        return OracleBackend(path=transcript)
    if kind == "http":
        return HttpBackend.from_env(**http_kwargs)
    raise ConfigError(f"unknown backend {kind!r}")


__all__ = [
    "BackendFault",
    "ConfigError",
    "HistoryEntry",
    "HttpBackend",
    "KeepSet",
    "OracleBackend",
    "ParseError",
    "RecordingBackend",
    "RobotStatus",
    "RulesBackend",
    "ScenePrompt",
    "SubpolicyCall",
    "ROOM_VOCABULARY",
    "apply_filter",
    "build_filter_prompt",
    "build_plan_prompt",
    "make_backend",
    "parse_filter_response",
    "parse_plan_response",
    "parse_scene_text",
    "request_hash",
    "serialize_scene",
]
