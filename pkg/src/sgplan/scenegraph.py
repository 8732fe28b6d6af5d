"""Hierarchical scene graph: root -> regions -> objects."""

from __future__ import annotations

import logging
import math
import re
import string
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Protocol, Sequence

from .gridworld import DOOR, ObjectView, Observation, cell_center
from .mapping import Frontier
from .voronoi import VoronoiGraph, closest_node, nodes_within, shortest_path_lengths

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1.3
CANDIDATE_RADIUS_M = 1.5
CANDIDATE_MINIMUM = 3

ROOM_VOCABULARY = (
    "kitchen",
    "living room",
    "bedroom",
    "bathroom",
    "dining room",
    "corridor",
    "garage",
    "garden/outdoor",
    "shop",
    "room",
)
FALLBACK_LABEL = "room"

# category keyword -> room label, used by the rules backend
ROOM_KEYWORDS: dict[str, tuple[str, ...]] = {
    "kitchen": ("fridge", "refrigerator", "oven", "stove", "sink", "microwave", "dishwasher", "counter", "toaster"),
    "living room": ("sofa", "couch", "tv", "television", "armchair", "coffee_table", "fireplace"),
    "bedroom": ("bed", "wardrobe", "nightstand", "dresser", "desk"),
    "bathroom": ("toilet", "bathtub", "shower", "towel_rack"),
    "dining room": ("dining_table", "sideboard"),
    "corridor": ("coat_rack", "shoe_rack"),
    "garage": ("car", "workbench", "toolbox"),
    "garden/outdoor": ("tree", "lawn", "bush", "bench", "flower_pot", "fence", "trash_can", "driveway"),
    "shop": ("cash_register", "display_case"),
}


class Backend(Protocol):
    def complete(self, messages: list[dict[str, str]], purpose: str = "plan") -> str: ...


def suffix(index: int) -> str:
    """0 -> A, 25 -> Z, 26 -> AA."""
    letters = string.ascii_uppercase
    out = ""
    index += 1
    while index:
        index, rem = divmod(index - 1, 26)
        out = letters[rem] + out
    return out


@dataclass
class ObjectRecord:
    sim_id: str
    instance_id: str
    category: str
    cell: tuple[int, int]
    position: tuple[float, float]
    articulated: bool = False
    articulation_state: str = "n/a"
    contained_in: str | None = None
    on_top_of: str | None = None
    attributes: dict[str, Any] = field(default_factory=dict)
    viewpoint: tuple[float, float] | None = None
    viewpoint_distance: float = math.inf
    is_door: bool = False


class ObjectMemory:
    """Everything the agent has observed about objects, keyed by simulator id."""

    def __init__(self, resolution: float):
        self.resolution = resolution
        self.records: dict[str, ObjectRecord] = {}
        self._counts: dict[str, int] = {}
        self.held: str | None = None

    def _instance_id(self, category: str) -> str:
        k = self._counts.get(category, 0)
        self._counts[category] = k + 1
        return f"{category}_{suffix(k)}"

    def _record(self, sim_id: str, category: str, cell: tuple[int, int], is_door: bool = False) -> ObjectRecord:
        rec = self.records.get(sim_id)
        if rec is None:
            rec = ObjectRecord(
                sim_id,
                self._instance_id(category),
                category,
                cell,
                cell_center(cell, self.resolution),
                is_door=is_door,
            )
            self.records[sim_id] = rec
        return rec

    def observe(self, obs: Observation) -> None:
        robot = (obs.robot_pose[0], obs.robot_pose[1])
        for view in obs.visible_objects:
            rec = self._record(view.id, view.category, tuple(view.position))
            self._update_from_view(rec, view)
            self._update_viewpoint(rec, robot)
        for door in obs.visible_doors:
            x0, y0, x1, y1 = door.bbox
            cell = ((x0 + x1) // 2, (y0 + y1) // 2)
            rec = self._record(door.id, DOOR, cell, is_door=True)
            rec.articulated = True
            rec.articulation_state = door.state
            rec.position = ((x0 + x1 + 1) / 2 * self.resolution, (y0 + y1 + 1) / 2 * self.resolution)
            self._update_viewpoint(rec, robot)

    def _update_from_view(self, rec: ObjectRecord, view: ObjectView) -> None:
        rec.cell = tuple(view.position)
        rec.position = cell_center(rec.cell, self.resolution)
        rec.articulated = view.articulated
        rec.articulation_state = view.articulation_state
        rec.contained_in = view.contained_in
        rec.on_top_of = view.on_top_of
        rec.attributes = dict(view.attributes)
        if self.held == rec.sim_id:
            self.held = None

    def _update_viewpoint(self, rec: ObjectRecord, robot: tuple[float, float]) -> None:
        d = math.hypot(robot[0] - rec.position[0], robot[1] - rec.position[1])
        if d < rec.viewpoint_distance:
            rec.viewpoint = robot
            rec.viewpoint_distance = d

    def note_grasp(self, sim_id: str) -> None:
        self.held = sim_id
        rec = self.records.get(sim_id)
        if rec is not None:
            rec.contained_in = None
            rec.on_top_of = None

    def note_place(self, sim_id: str, target: str, relation: str) -> None:
        self.held = None
        rec = self.records.get(sim_id)
        base = self.records.get(target)
        if rec is None or base is None:
            return
        rec.cell = base.cell
        rec.position = base.position
        rec.contained_in = target if relation == "inside" else None
        rec.on_top_of = target if relation == "ontop" else None
        rec.viewpoint = base.viewpoint
        rec.viewpoint_distance = base.viewpoint_distance

    def note_articulation(self, sim_id: str, state: str) -> None:
        rec = self.records.get(sim_id)
        if rec is not None:
            rec.articulation_state = state

    def instance_of(self, sim_id: str) -> str | None:
        rec = self.records.get(sim_id)
        return rec.instance_id if rec else None


@dataclass
class ObjectNode:
    instance_id: str
    sim_id: str
    category: str
    position: tuple[float, float]
    attributes: dict[str, Any]
    relations: list[tuple[str, str]]
    viewpoint: tuple[float, float] | None
    region_id: str


@dataclass
class RegionNode:
    id: str
    label: str
    components: list[int]
    node_ids: list[int]
    frontier_count: int = 0
    merged_from: list[str] = field(default_factory=list)

    @property
    def exploration_complete(self) -> bool:
        return self.frontier_count == 0


@dataclass
class SceneGraph:
    regions: dict[str, RegionNode] = field(default_factory=dict)
    objects: dict[str, ObjectNode] = field(default_factory=dict)
    robot_region: str | None = None
    held: str | None = None
    hidden_regions: dict[str, RegionNode] = field(default_factory=dict)
    hidden_objects: dict[str, ObjectNode] = field(default_factory=dict)
    next_region: int = 0
    region_positions: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    label_cache: dict[str, tuple[tuple[str, ...], str]] = field(default_factory=dict)
    display_names: dict[str, str] | None = None

    def region_names(self) -> dict[str, str]:
        """Display names: the room label, numbered when several regions share it.

        A sub-graph carries the names of the graph it was cut from, so a room
        keeps one name whether or not it is filtered.
        """
        if self.display_names is not None:
            return {rid: self.display_names[rid] for rid in self.regions}
        by_label: dict[str, list[str]] = {}
        for rid in sorted(self.regions, key=region_sort_key):
            by_label.setdefault(self.regions[rid].label, []).append(rid)
        names = {}
        for label, rids in by_label.items():
            if len(rids) == 1:
                names[rids[0]] = label
            else:
                for i, rid in enumerate(rids, 1):
                    names[rid] = f"{label} {i}"
        return names

    def resolve_region(self, name: str) -> str | None:
        name = name.strip().lower()
        for rid, display in self.region_names().items():
            if display.lower() == name or rid.lower() == name:
                return rid
        return None

    def objects_in(self, region_id: str) -> list[ObjectNode]:
        return sorted(
            (o for o in self.objects.values() if o.region_id == region_id), key=lambda o: o.instance_id
        )

    def by_sim_id(self, sim_id: str) -> ObjectNode | None:
        return next((o for o in self.objects.values() if o.sim_id == sim_id), None)

    def full(self) -> "SceneGraph":
        """The graph with any pruned content restored."""
        regions = {**self.hidden_regions, **self.regions}
        objects = {**self.hidden_objects, **self.objects}
        return replace(self, regions=regions, objects=objects, hidden_regions={}, hidden_objects={})


def region_sort_key(region_id: str) -> tuple[int, str]:
    m = re.search(r"(\d+)$", region_id)
    return (int(m.group(1)) if m else -1, region_id)


# ---------------------------------------------------------------------------
# object assignment


@dataclass(frozen=True)
class Assignment:
    component: int
    pair: tuple[int, int] | None
    cost: float


def assignment_cost(
    graph: VoronoiGraph, v: int, u: int, obj: Sequence[float], viewpoint: Sequence[float], d_vu: float, lam: float
) -> float:
    pv = graph.positions[v]
    pu = graph.positions[u]
    return d_vu + math.hypot(obj[0] - pv[0], obj[1] - pv[1]) ** lam + math.hypot(viewpoint[0] - pu[0], viewpoint[1] - pu[1])


def candidate_sets(
    graph: VoronoiGraph,
    obj: Sequence[float],
    viewpoint: Sequence[float],
    radius: float = CANDIDATE_RADIUS_M,
    minimum: int = CANDIDATE_MINIMUM,
) -> tuple[list[int], list[int]]:
    return nodes_within(graph, obj, radius, minimum), nodes_within(graph, viewpoint, radius, minimum)


def assign_object(
    obj: Sequence[float],
    viewpoint: Sequence[float] | None,
    graph: VoronoiGraph,
    lam: float = DEFAULT_LAMBDA,
    radius: float = CANDIDATE_RADIUS_M,
    minimum: int = CANDIDATE_MINIMUM,
    labels: Mapping[int, int] | None = None,
) -> Assignment | None:
    """Pick the node pair minimising path length plus weighted Euclidean offsets.

    ``v`` is drawn from nodes near the object, ``u`` from nodes near the
    viewpoint the object was best seen from. Pairs in different components
    have infinite cost. The object goes to the component holding the best
    pair; ties go to the smallest ``(v, u)``.
    """
    labels = graph.regions if labels is None else labels
    if len(graph) == 0:
        return None
    viewpoint = obj if viewpoint is None else viewpoint
    s_obj, s_view = candidate_sets(graph, obj, viewpoint, radius, minimum)
    if not s_obj or not s_view:
        node = closest_node(graph, obj, labels=labels)
        log.info("empty candidate set for object at %s; using nearest node %s", obj, node)
        return Assignment(labels[node], None, math.inf)
    best: tuple[float, int, int] | None = None
    for v in s_obj:
        dist = shortest_path_lengths(graph, v)
        for u in s_view:
            if labels[u] != labels[v] or u not in dist:
                continue
            cost = assignment_cost(graph, v, u, obj, viewpoint, dist[u], lam)
            if best is None or (cost, v, u) < best:
                best = (cost, v, u)
    if best is None:
        node = closest_node(graph, obj, labels=labels)
        log.info("no finite candidate pair for object at %s; using nearest node %s", obj, node)
        return Assignment(labels[node], None, math.inf)
    cost, v, u = best
    return Assignment(labels[v], (v, u), cost)


# ---------------------------------------------------------------------------
# room classification


def classification_messages(categories: Sequence[str]) -> list[dict[str, str]]:
    vocab = ", ".join(ROOM_VOCABULARY)
    return [
        {
            "role": "system",
            "content": "You classify rooms of a house from the objects they contain. "
            f"Answer with exactly one label from: {vocab}.",
        },
        {"role": "user", "content": "Objects: " + ", ".join(categories) + "\nRoom label:"},
    ]


def parse_room_label(reply: str) -> str | None:
    text = reply.lower()
    spans = [
        (m.start(), m.end(), label)
        for label in ROOM_VOCABULARY
        for m in re.finditer(r"(?<![a-z])" + re.escape(label) + r"(?![a-z])", text)
    ]
    # "room" inside "living room" is not a mention of its own
    spans = [s for s in spans if not any(o[0] <= s[0] and s[1] <= o[1] and o != s for o in spans)]
    if not spans:
        return None
    return max(spans)[2]  # last mention wins


def keyword_room_label(categories: Iterable[str]) -> str:
    scores = {label: 0 for label in ROOM_VOCABULARY}
    for cat in categories:
        cat = cat.lower()
        for label, words in ROOM_KEYWORDS.items():
            if any(w == cat or w in cat.split("_") or (len(w) > 3 and w in cat) for w in words):
                scores[label] += 1
    best = max(ROOM_VOCABULARY, key=lambda lbl: (scores[lbl], -ROOM_VOCABULARY.index(lbl)))
    return best if scores[best] > 0 else FALLBACK_LABEL


def classify_region(categories: Sequence[str], backend: Backend | None, retries: int = 1) -> str:
    cats = sorted(set(categories))
    if not cats:
        return FALLBACK_LABEL
    if backend is None:
        return keyword_room_label(cats)
    messages = classification_messages(cats)
    for _ in range(retries + 1):
        label = parse_room_label(backend.complete(messages, purpose="classify"))
        if label is not None:
            return label
    log.warning("room classification unparseable for %s", cats)
    return FALLBACK_LABEL


# ---------------------------------------------------------------------------
# graph maintenance


def _region_groups(graph: VoronoiGraph) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for node in graph.nodes():
        groups.setdefault(graph.regions[node], []).append(node)
    return groups


def update_scene_graph(
    prev: SceneGraph | None,
    graph: VoronoiGraph,
    memory: ObjectMemory,
    robot_position: Sequence[float],
    frontiers: Sequence[Frontier] = (),
    backend: Backend | None = None,
    lam: float = DEFAULT_LAMBDA,
) -> SceneGraph:
    """Rebuild regions from ``graph`` and (re)assign every remembered object.

    Region ids persist across updates: a new region inherits the id of the
    previous region(s) whose nodes now fall inside it. When several previous
    regions collapse into one (their separating unexplored area was mapped),
    they merge under the smallest id and the label is re-classified.
    """
    prev = (prev or SceneGraph()).full()
    out = SceneGraph(next_region=prev.next_region, label_cache=dict(prev.label_cache))
    groups = _region_groups(graph)

    # inherit region ids
    votes: dict[int, list[str]] = {}
    for rid in sorted(prev.region_positions, key=region_sort_key):
        tally: dict[int, int] = {}
        for pos in prev.region_positions[rid]:
            node = closest_node(graph, pos)
            if node is not None:
                tally[graph.regions[node]] = tally.get(graph.regions[node], 0) + 1
        if tally:
            label = max(sorted(tally), key=lambda k: tally[k])
            votes.setdefault(label, []).append(rid)
    ids: dict[int, str] = {}
    for label in sorted(groups):
        parents = sorted(votes.get(label, []), key=region_sort_key)
        if parents:
            ids[label] = parents[0]
        else:
            ids[label] = f"region_{out.next_region}"
            out.next_region += 1
        out.regions[ids[label]] = RegionNode(
            ids[label], FALLBACK_LABEL, [label], groups[label], merged_from=parents[1:]
        )
        out.region_positions[ids[label]] = [graph.positions[n] for n in groups[label]]

    robot_node = closest_node(graph, robot_position)
    if robot_node is None:
        rid = prev.robot_region or f"region_{out.next_region}"
        if rid not in prev.regions:
            out.next_region += 1
        out.regions[rid] = RegionNode(rid, FALLBACK_LABEL, [], [])
        out.robot_region = rid
    else:
        out.robot_region = ids[graph.regions[robot_node]]

    # objects
    sim_to_inst = {r.sim_id: r.instance_id for r in memory.records.values()}
    for rec in sorted(memory.records.values(), key=lambda r: r.instance_id):
        if rec.sim_id == memory.held:
            out.held = rec.instance_id
            continue
        result = assign_object(rec.position, rec.viewpoint, graph, lam)
        region = ids[result.component] if result is not None else out.robot_region
        attrs: dict[str, Any] = {}
        if rec.articulated:
            attrs["state"] = rec.articulation_state
        attrs.update({k: v for k, v in rec.attributes.items() if k != "fixed"})
        attrs["ref"] = rec.sim_id
        relations = []
        if rec.contained_in and rec.contained_in in sim_to_inst:
            relations.append(("inside", sim_to_inst[rec.contained_in]))
        if rec.on_top_of and rec.on_top_of in sim_to_inst:
            relations.append(("ontop", sim_to_inst[rec.on_top_of]))
        out.objects[rec.instance_id] = ObjectNode(
            rec.instance_id, rec.sim_id, rec.category, rec.position, attrs, relations, rec.viewpoint, region
        )

    # frontiers
    # nearest node by straight line can sit behind a wall; prefer the robot's component
    robot_comp = graph.components[robot_node] if robot_node is not None else None
    for frontier in frontiers:
        anchor = cell_center(frontier.anchor(), memory.resolution)
        node = closest_node(graph, anchor, component=robot_comp)
        if node is None:
            node = closest_node(graph, anchor)
        if node is None:
            rid = out.robot_region
        else:
            rid = ids[graph.regions[node]]
        frontier.region_id = rid
        out.regions[rid].frontier_count += 1

    # labels
    for rid, region in out.regions.items():
        cats = tuple(sorted({o.category for o in out.objects.values() if o.region_id == rid and o.category != DOOR}))
        cached = out.label_cache.get(rid)
        if cached is not None and cached[0] == cats and not region.merged_from:
            region.label = cached[1]
        else:
            region.label = classify_region(cats, backend)
            out.label_cache[rid] = (cats, region.label)
    return out


def prune_unreachable(sg: SceneGraph, graph: VoronoiGraph, robot_position: Sequence[float]) -> SceneGraph:
    """Restrict the graph to regions navigationally connected to the robot.

    Pruned regions and objects are kept aside and come back once a later
    call sees them connected again.
    """
    full = sg.full()
    robot_node = closest_node(graph, robot_position)
    if robot_node is None:
        return full
    comp = graph.components[robot_node]
    keep = set()
    for rid, region in full.regions.items():
        if not region.node_ids or any(graph.components.get(n) == comp for n in region.node_ids):
            keep.add(rid)
    keep.add(full.robot_region)
    regions = {k: v for k, v in full.regions.items() if k in keep}
    hidden_regions = {k: v for k, v in full.regions.items() if k not in keep}
    objects = {k: v for k, v in full.objects.items() if v.region_id in keep}
    hidden_objects = {k: v for k, v in full.objects.items() if v.region_id not in keep}
    return replace(
        full, regions=regions, objects=objects, hidden_regions=hidden_regions, hidden_objects=hidden_objects
    )


def scene_graph_to_dict(sg: SceneGraph) -> dict[str, Any]:
    names = sg.region_names()
    return {
        "robot_region": sg.robot_region,
        "held": sg.held,
        "regions": [
            {
                "id": rid,
                "name": names[rid],
                "label": sg.regions[rid].label,
                "frontiers": sg.regions[rid].frontier_count,
                "objects": [
                    {
                        "id": o.instance_id,
                        "category": o.category,
                        "attributes": o.attributes,
                        "relations": [list(r) for r in o.relations],
                    }
                    for o in sg.objects_in(rid)
                ],
            }
            for rid in sorted(sg.regions, key=region_sort_key)
        ],
    }
