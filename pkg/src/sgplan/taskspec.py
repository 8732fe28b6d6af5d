"""Task files, goal conditions and benchmark metrics.

Goal conditions use a small predicate language over ``inside``, ``ontop``,
``open`` and ``closed``. A condition is either ground, ``inside(apple_1,
bag_1)``, or universally quantified over a category,
``forall beer_bottle inside fridge_1``. Arguments may be ``$variables``
bound in the task file.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

ARITY = {"inside": 2, "ontop": 2, "open": 1, "closed": 1}
TERMINATIONS = ("done_call", "step_cap", "post_completion_cap", "fault")

_IDENT = r"\$?[A-Za-z_][\w.\-]*"
_VAR = re.compile(r"\$([A-Za-z_][\w.\-]*)")


class TaskParseError(ValueError):
    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"{message} (line {line}, column {column})")
        self.message = message
        self.line = line
        self.column = column


@dataclass(frozen=True)
class GoalCondition:
    pred: str
    args: tuple[str, ...] = ()
    category: str | None = None  # set for quantified conditions

    @property
    def is_forall(self) -> bool:
        return self.category is not None

    @property
    def target(self) -> str | None:
        return self.args[-1] if self.is_forall and self.args else None

    def serialize(self) -> str:
        if self.is_forall:
            return " ".join(["forall", self.category, self.pred, *self.args])
        return f"{self.pred}({', '.join(self.args)})"

    def referenced_objects(self, categories: Mapping[str, str]) -> set[str]:
        refs = set(self.args)
        if self.is_forall:
            refs |= {oid for oid, cat in categories.items() if cat == self.category}
        return refs


@dataclass
class TaskSpec:
    name: str
    description_template: str
    bindings: dict[str, str]
    goal_conditions: list[GoalCondition]

    @property
    def description(self) -> str:
        return _VAR.sub(lambda m: self.bindings[m.group(1)], self.description_template)

    def relevant_categories(self, categories: Mapping[str, str] | None = None) -> set[str]:
        """Quantified categories plus, given ``categories``, those of bound objects."""
        cats = {g.category for g in self.goal_conditions if g.category}
        if categories is not None:
            for g in self.goal_conditions:
                cats |= {categories[a] for a in g.args if a in categories}
        return cats

    def referenced_ids(self) -> set[str]:
        return {a for g in self.goal_conditions for a in g.args}

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description_template": self.description_template,
            "bindings": dict(self.bindings),
            "goal_conditions": [g.serialize() for g in self.goal_conditions],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _locate(source: str, needle: str) -> tuple[int, int]:
    pos = source.find(needle)
    if pos < 0:
        return 1, 1
    line = source.count("\n", 0, pos) + 1
    col = pos - (source.rfind("\n", 0, pos) + 1) + 1
    return line, col


def parse_condition(
    text: str, bindings: Mapping[str, str], line: int = 1, column: int = 1
) -> GoalCondition:
    """Parse one condition string; errors carry the position of the offending token."""

    def fail(msg: str, offset: int = 0) -> TaskParseError:
        return TaskParseError(msg, line, column + offset)

    def resolve(tok: str, offset: int) -> str:
        if tok.startswith("$"):
            name = tok[1:]
            if name not in bindings:
                raise fail(f"unbound variable ${name}", offset)
            return bindings[name]
        return tok

    stripped = text.strip()
    lead = len(text) - len(text.lstrip())
    m = re.fullmatch(r"(\w+)\s*\((.*)\)", stripped)
    if m:
        head = m.group(1)
        body_at = lead + m.start(2)
        raw = [a for a in m.group(2).split(",")]
        tokens: list[tuple[str, int]] = []
        off = body_at
        for a in raw:
            tokens.append((a.strip(), off + len(a) - len(a.lstrip())))
            off += len(a) + 1
        if tokens == [("", body_at)]:
            tokens = []
    else:
        tokens = [(t.group(0), lead + t.start()) for t in re.finditer(r"\S+", stripped)]
        if not tokens:
            raise fail("empty condition")
        head = tokens[0][0]
        tokens = tokens[1:]
    for tok, off in tokens:
        if not re.fullmatch(_IDENT, tok):
            raise fail(f"bad argument {tok!r}", off)

    if head == "forall":
        if len(tokens) < 2:
            raise fail("forall needs a category and a predicate")
        (category, _), (pred, pred_off) = tokens[0], tokens[1]
        if pred not in ARITY:
            raise fail(f"unknown predicate {pred!r}", pred_off)
        rest = tokens[2:]
        if len(rest) != ARITY[pred] - 1:
            raise fail(f"arity error: forall {pred} takes {ARITY[pred] - 1} target argument(s)", pred_off)
        return GoalCondition(pred, tuple(resolve(t, o) for t, o in rest), category=category)
    if head not in ARITY:
        raise fail(f"unknown predicate {head!r}")
    if len(tokens) != ARITY[head]:
        raise fail(f"arity error: {head} takes {ARITY[head]} argument(s), got {len(tokens)}")
    return GoalCondition(head, tuple(resolve(t, o) for t, o in tokens))


def parse_task(
    source: str | Mapping[str, Any], scene_objects: Mapping[str, str] | None = None
) -> TaskSpec:
    """Parse a JSON task file.

    ``scene_objects`` (id -> category), when given, is used to check that
    bound ids and quantified categories exist in the scene.
    """
    if isinstance(source, Mapping):
        data = dict(source)
        text = json.dumps(data, indent=1)
    else:
        text = source
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TaskParseError(exc.msg, exc.lineno, exc.colno) from None
    for key in ("name", "description_template", "goal_conditions"):
        if key not in data:
            raise TaskParseError(f"missing field {key!r}")
    bindings = {str(k): str(v) for k, v in data.get("bindings", {}).items()}
    template = data["description_template"]
    for m in _VAR.finditer(template):
        if m.group(1) not in bindings:
            line, col = _locate(text, template)
            raise TaskParseError(f"unbound variable ${m.group(1)} in description", line, col + m.start())
    goals = []
    for cond in data["goal_conditions"]:
        line, col = _locate(text, json.dumps(cond)[1:-1])
        goals.append(parse_condition(cond, bindings, line, col))
    if not goals:
        raise TaskParseError("task has no goal conditions")
    task = TaskSpec(str(data["name"]), template, bindings, goals)
    if scene_objects is not None:
        scene_cats = set(scene_objects.values())
        for var, oid in bindings.items():
            if oid not in scene_objects:
                line, col = _locate(text, var)
                raise TaskParseError(f"variable ${var} bound to unknown object {oid!r}", line, col)
        for g in goals:
            for a in g.args:
                if a not in scene_objects:
                    line, col = _locate(text, a)
                    raise TaskParseError(f"unknown object {a!r}", line, col)
            if g.category is not None and g.category not in scene_cats:
                line, col = _locate(text, g.category)
                raise TaskParseError(f"unknown category {g.category!r}", line, col)
    return task


def load_task_file(path: str | Path, scene_objects: Mapping[str, str] | None = None) -> TaskSpec:
    return parse_task(Path(path).read_text(), scene_objects)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_condition(cond: GoalCondition, atoms: frozenset | set, categories: Mapping[str, str]) -> bool:
    if not cond.is_forall:
        return (cond.pred, *cond.args) in atoms
    members = sorted(oid for oid, cat in categories.items() if cat == cond.category)
    return all((cond.pred, oid, *cond.args) in atoms for oid in members)


def evaluate_goals(task: TaskSpec, atoms: frozenset | set, categories: Mapping[str, str]) -> list[bool]:
    """Per-condition satisfaction against ground-truth relation atoms."""
    return [evaluate_condition(g, atoms, categories) for g in task.goal_conditions]


def observed_flags(task: TaskSpec, observed: Iterable[str], categories: Mapping[str, str]) -> list[bool]:
    seen = set(observed)
    return [g.referenced_objects(categories) <= seen for g in task.goal_conditions]


# ---------------------------------------------------------------------------
# records and metrics


@dataclass
class EpisodeRecord:
    task: str
    terminated_by: str
    satisfied: list[bool]
    observed: list[bool]
    steps: int
    log_path: str | None = None
    scene: str | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.terminated_by not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.terminated_by!r}")
        if len(self.satisfied) != len(self.observed):
            raise ValueError(
                f"episode {self.task}: satisfied and observed flags differ in length "
                f"({len(self.satisfied)} vs {len(self.observed)})"
            )
        if not self.satisfied:
            raise ValueError(f"episode {self.task}: no goal conditions")

    @property
    def complete(self) -> bool:
        return all(self.satisfied)

    @property
    def success(self) -> bool:
        return self.complete and self.terminated_by == "done_call"

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "terminated_by": self.terminated_by,
            "satisfied": list(self.satisfied),
            "observed": list(self.observed),
            "steps": self.steps,
            "log_path": self.log_path,
            "scene": self.scene,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EpisodeRecord":
        return cls(
            task=data["task"],
            terminated_by=data["terminated_by"],
            satisfied=[bool(x) for x in data["satisfied"]],
            observed=[bool(x) for x in data["observed"]],
            steps=int(data["steps"]),
            log_path=data.get("log_path"),
            scene=data.get("scene"),
            seed=data.get("seed"),
        )


@dataclass
class MetricsReport:
    sr: Fraction
    ttc: Fraction
    tp: Fraction
    rtp: Fraction | None  # None when no episode had an eligible condition
    episodes: int
    rtp_episodes: int
    per_task: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        def num(x: Fraction | None) -> Any:
            return None if x is None else {"value": float(x), "exact": f"{x.numerator}/{x.denominator}"}

        return {
            "SR": num(self.sr),
            "TTC": num(self.ttc),
            "TP": num(self.tp),
            "rTP": num(self.rtp),
            "episodes": self.episodes,
            "rtp_episodes": self.rtp_episodes,
            "per_task": self.per_task,
        }

    def to_text(self) -> str:
        rows = [("metric", "value", "exact")]
        for name, val in (("SR", self.sr), ("TTC", self.ttc), ("TP", self.tp), ("rTP", self.rtp)):
            if val is None:
                rows.append((name, "n/a", "n/a"))
            else:
                rows.append((name, f"{100 * float(val):.1f}%", f"{val.numerator}/{val.denominator}"))
        rows.append(("episodes", str(self.episodes), ""))
        rows.append(("rTP episodes", str(self.rtp_episodes), ""))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def compute_metrics(records: Sequence[EpisodeRecord]) -> MetricsReport:
    if not records:
        raise ValueError("no episode records")
    n = len(records)
    sr = Fraction(sum(r.success for r in records), n)
    ttc = Fraction(sum(r.complete for r in records), n)
    tp = sum((Fraction(sum(r.satisfied), len(r.satisfied)) for r in records), Fraction(0)) / n
    shares = []
    for r in records:
        eligible = sum(r.observed)
        if eligible:
            hit = sum(s and o for s, o in zip(r.satisfied, r.observed))
            shares.append(Fraction(hit, eligible))
    rtp = sum(shares, Fraction(0)) / len(shares) if shares else None
    per_task = [
        {
            "task": r.task,
            "success": r.success,
            "complete": r.complete,
            "progress": float(Fraction(sum(r.satisfied), len(r.satisfied))),
            "steps": r.steps,
            "terminated_by": r.terminated_by,
        }
        for r in sorted(records, key=lambda r: (r.task, r.scene or "", r.seed or 0))
    ]
    return MetricsReport(sr, ttc, tp, rtp, n, len(shares), per_task)
