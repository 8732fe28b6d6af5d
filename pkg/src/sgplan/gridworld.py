"""Deterministic 2D grid-world simulator.

The world is a bird's-eye grid of cells (x = column, y = row). Geometry is
expressed in meters with cell ``(x, y)`` centred at
``((x + 0.5) * res, (y + 0.5) * res)``. Manipulation is done through
"magic" actions: precondition-checked, instantaneous state changes.
"""

from __future__ import annotations

import copy
import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1
DEFAULT_RESOLUTION = 0.075
SENSOR_RANGE_M = 5.0
SENSOR_FOV = math.radians(90.0)
FORWARD_STEP_M = 0.075
MAX_TURN = math.radians(35.0)
REACH_RADIUS_M = 1.5
DEFAULT_FREE_SPACE = ("floor", "carpet", "lawn", "driveway")

# categories reported for door footprints
DOORWAY = "doorway"
DOOR = "door"


class SceneError(ValueError):
    """Raised when a scene violates one of its invariants."""


class CellKind(enum.IntEnum):
    FREE = 0
    WALL = 1
    FURNITURE = 2
    DOOR_FRAME = 3


class Verb(str, enum.Enum):
    OPEN = "open"
    CLOSE = "close"
    GRASP = "grasp"
    PLACE_INSIDE = "place_inside"
    PLACE_ONTOP = "place_ontop"


Cell = tuple[int, int]
Rect = tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive


@dataclass
class DoorSpec:
    id: str
    bbox: Rect
    state: str = "closed"

    @property
    def width(self) -> int:
        return self.bbox[2] - self.bbox[0] + 1

    @property
    def height(self) -> int:
        return self.bbox[3] - self.bbox[1] + 1

    @property
    def orientation(self) -> str:
        """``horizontal`` when the opening runs along x."""
        return "horizontal" if self.width >= self.height else "vertical"

    @property
    def length_cells(self) -> int:
        return max(self.width, self.height)

    @property
    def center(self) -> tuple[float, float]:
        """Footprint centre in (fractional) cell coordinates."""
        x0, y0, x1, y1 = self.bbox
        return ((x0 + x1 + 1) / 2.0, (y0 + y1 + 1) / 2.0)

    def cells(self) -> Iterator[Cell]:
        x0, y0, x1, y1 = self.bbox
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                yield (x, y)

    @property
    def is_open(self) -> bool:
        return self.state == "open"


@dataclass
class ObjectSpec:
    id: str
    category: str
    position: Cell
    articulated: bool = False
    articulation_state: str = "n/a"
    contained_in: str | None = None
    on_top_of: str | None = None
    attributes: dict[str, Any] = field(default_factory=dict)


@dataclass
class RoomAnnotation:
    name: str
    label: str
    rects: list[Rect]

    def contains(self, cell: Cell) -> bool:
        x, y = cell
        return any(r[0] <= x <= r[2] and r[1] <= y <= r[3] for r in self.rects)


@dataclass
class SceneSpec:
    width_cells: int
    height_cells: int
    cells: np.ndarray  # (H, W) CellKind codes
    floor_categories: np.ndarray  # (H, W) category of Free cells
    resolution_m: float = DEFAULT_RESOLUTION
    free_space_categories: frozenset[str] = frozenset(DEFAULT_FREE_SPACE)
    doors: list[DoorSpec] = field(default_factory=list)
    objects: list[ObjectSpec] = field(default_factory=list)
    room_annotations: list[RoomAnnotation] = field(default_factory=list)
    name: str = "scene"

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width_cells and 0 <= cell[1] < self.height_cells

    def room_of(self, cell: Cell) -> str | None:
        for room in self.room_annotations:
            if room.contains(cell):
                return room.name
        return None


@dataclass
class RobotState:
    position: tuple[float, float]
    heading: float = 0.0
    gripper: str | None = None


@dataclass
class SimState:
    spec: SceneSpec
    robot: RobotState
    objects: dict[str, ObjectSpec]
    doors: dict[str, DoorSpec]
    version: int = 0
    _static_categories: np.ndarray | None = field(default=None, repr=False)
    _category_cache: tuple[int, np.ndarray] | None = field(default=None, repr=False)

    @property
    def resolution(self) -> float:
        return self.spec.resolution_m

    def robot_cell(self) -> Cell:
        return position_to_cell(self.robot.position, self.resolution)

    def entity_category(self, entity_id: str) -> str:
        if entity_id in self.doors:
            return DOOR
        return self.objects[entity_id].category


@dataclass(frozen=True)
class ObjectView:
    id: str
    category: str
    position: Cell
    articulation_state: str
    contained_in: str | None
    on_top_of: str | None
    articulated: bool = False
    attributes: tuple[tuple[str, Any], ...] = ()


@dataclass(frozen=True)
class DoorView:
    id: str
    bbox: Rect
    state: str


@dataclass
class Observation:
    cells: np.ndarray  # (N, 2) int x, y
    kinds: np.ndarray  # (N,) CellKind codes
    categories: np.ndarray  # (N,) object array of str
    visible_objects: list[ObjectView]
    visible_doors: list[DoorView]
    robot_pose: tuple[float, float, float]

    @property
    def revealed_cells(self) -> list[tuple[Cell, CellKind, str]]:
        return [
            ((int(x), int(y)), CellKind(int(k)), str(c))
            for (x, y), k, c in zip(self.cells, self.kinds, self.categories)
        ]

    def object_ids(self) -> set[str]:
        return {v.id for v in self.visible_objects}


@dataclass
class ActionResult:
    success: bool
    feedback: str = ""
    world_delta: list[Any] = field(default_factory=list)


@dataclass(frozen=True)
class Motion:
    kind: str  # forward | turn_left | turn_right
    angle: float = 0.0


FORWARD = Motion("forward")


def turn_left(angle: float = MAX_TURN) -> Motion:
    return Motion("turn_left", angle)


def turn_right(angle: float = MAX_TURN) -> Motion:
    return Motion("turn_right", angle)


def cell_center(cell: Cell, resolution: float) -> tuple[float, float]:
    return ((cell[0] + 0.5) * resolution, (cell[1] + 0.5) * resolution)


def position_to_cell(position: Sequence[float], resolution: float) -> Cell:
    return (int(math.floor(position[0] / resolution)), int(math.floor(position[1] / resolution)))


def _rect_distance(point: Sequence[float], rect: Rect, resolution: float) -> float:
    """Euclidean distance from ``point`` (meters) to a cell rectangle's area."""
    lo_x, lo_y = rect[0] * resolution, rect[1] * resolution
    hi_x, hi_y = (rect[2] + 1) * resolution, (rect[3] + 1) * resolution
    dx = max(lo_x - point[0], 0.0, point[0] - hi_x)
    dy = max(lo_y - point[1], 0.0, point[1] - hi_y)
    return math.hypot(dx, dy)


# ---------------------------------------------------------------------------
# scene files


_KIND_NAMES = {
    "free": CellKind.FREE,
    "wall": CellKind.WALL,
    "furniture": CellKind.FURNITURE,
    "door": CellKind.DOOR_FRAME,
}


def scene_from_dict(data: Mapping[str, Any]) -> SceneSpec:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SceneError(f"unsupported schema_version {version!r}")
    legend = data["legend"]
    rows = data["rows"]
    height = int(data["height_cells"])
    width = int(data["width_cells"])
    if len(rows) != height or any(len(r) != width for r in rows):
        raise SceneError("rows do not match width_cells/height_cells")
    cells = np.zeros((height, width), dtype=np.int8)
    floor = np.full((height, width), "", dtype=object)
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            try:
                entry = legend[ch]
            except KeyError:
                raise SceneError(f"legend has no entry for {ch!r}") from None
            cells[y, x] = _KIND_NAMES[entry["kind"]]
            floor[y, x] = entry.get("category", "")
    doors = [
        DoorSpec(id=d["id"], bbox=tuple(d["bbox"]), state=d.get("state", "closed"))
        for d in data.get("doors", [])
    ]
    objects = [
        ObjectSpec(
            id=o["id"],
            category=o["category"],
            position=tuple(o["position"]),
            articulated=bool(o.get("articulated", False)),
            articulation_state=o.get("articulation_state", "n/a"),
            contained_in=o.get("contained_in"),
            on_top_of=o.get("on_top_of"),
            attributes=dict(o.get("attributes", {})),
        )
        for o in data.get("objects", [])
    ]
    rooms = [
        RoomAnnotation(r["name"], r.get("label", r["name"]), [tuple(x) for x in r["rects"]])
        for r in data.get("room_annotations", [])
    ]
    return SceneSpec(
        width_cells=width,
        height_cells=height,
        cells=cells,
        floor_categories=floor,
        resolution_m=float(data.get("resolution_m", DEFAULT_RESOLUTION)),
        free_space_categories=frozenset(data.get("free_space_categories", DEFAULT_FREE_SPACE)),
        doors=doors,
        objects=objects,
        room_annotations=rooms,
        name=data.get("name", "scene"),
    )


def scene_to_dict(spec: SceneSpec) -> dict[str, Any]:
    glyphs = {CellKind.WALL: "#", CellKind.FURNITURE: "F", CellKind.DOOR_FRAME: "D"}
    legend: dict[str, dict[str, str]] = {
        "#": {"kind": "wall"},
        "F": {"kind": "furniture"},
        "D": {"kind": "door"},
    }
    free_glyphs: dict[str, str] = {}
    spare = iter(".,:;_-~'`^")
    rows = []
    for y in range(spec.height_cells):
        row = []
        for x in range(spec.width_cells):
            kind = CellKind(int(spec.cells[y, x]))
            if kind == CellKind.FREE:
                cat = spec.floor_categories[y, x] or "floor"
                if cat not in free_glyphs:
                    glyph = next(spare)
                    free_glyphs[cat] = glyph
                    legend[glyph] = {"kind": "free", "category": cat}
                row.append(free_glyphs[cat])
            else:
                row.append(glyphs[kind])
        rows.append("".join(row))
    return {
        "schema_version": SCHEMA_VERSION,
        "name": spec.name,
        "resolution_m": spec.resolution_m,
        "width_cells": spec.width_cells,
        "height_cells": spec.height_cells,
        "free_space_categories": sorted(spec.free_space_categories),
        "legend": legend,
        "rows": rows,
        "doors": [{"id": d.id, "bbox": list(d.bbox), "state": d.state} for d in spec.doors],
        "objects": [
            {
                "id": o.id,
                "category": o.category,
                "position": list(o.position),
                "articulated": o.articulated,
                "articulation_state": o.articulation_state,
                "contained_in": o.contained_in,
                "on_top_of": o.on_top_of,
                "attributes": o.attributes,
            }
            for o in spec.objects
        ],
        "room_annotations": [
            {"name": r.name, "label": r.label, "rects": [list(x) for x in r.rects]}
            for r in spec.room_annotations
        ],
    }


def load_scene_file(path: str | Path) -> SceneSpec:
    return scene_from_dict(json.loads(Path(path).read_text()))


def save_scene_file(spec: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(spec), indent=1) + "\n")


# ---------------------------------------------------------------------------
# validation and loading


def validate_scene(spec: SceneSpec) -> None:
    """Raise :class:`SceneError` naming the first violated invariant."""
    if not spec.resolution_m > 0:
        raise SceneError("resolution_m must be positive")
    if spec.cells.shape != (spec.height_cells, spec.width_cells):
        raise SceneError("cell grid shape does not match width_cells/height_cells")

    owner = np.full(spec.cells.shape, -1, dtype=np.int32)
    ids: set[str] = set()
    for i, door in enumerate(spec.doors):
        if door.id in ids:
            raise SceneError(f"duplicate id {door.id}")
        ids.add(door.id)
        if door.state not in ("open", "closed"):
            raise SceneError(f"door {door.id}: state must be open or closed")
        x0, y0, x1, y1 = door.bbox
        if not (spec.in_bounds((x0, y0)) and spec.in_bounds((x1, y1)) and x0 <= x1 and y0 <= y1):
            raise SceneError(f"door {door.id}: bbox out of bounds")
        for x, y in door.cells():
            if spec.cells[y, x] != CellKind.DOOR_FRAME:
                raise SceneError(f"door {door.id}: bbox covers a non-DoorFrame cell ({x}, {y})")
            if owner[y, x] >= 0:
                raise SceneError(f"door {door.id}: DoorFrame cell ({x}, {y}) belongs to two doors")
            owner[y, x] = i
    orphan = (spec.cells == CellKind.DOOR_FRAME) & (owner < 0)
    if orphan.any():
        y, x = np.argwhere(orphan)[0]
        raise SceneError(f"DoorFrame cell ({x}, {y}) belongs to no door")

    by_id: dict[str, ObjectSpec] = {}
    for obj in spec.objects:
        if obj.id in ids:
            raise SceneError(f"duplicate id {obj.id}")
        ids.add(obj.id)
        by_id[obj.id] = obj
    for obj in spec.objects:
        if not spec.in_bounds(obj.position):
            raise SceneError(f"object {obj.id}: position out of bounds")
        if obj.contained_in and obj.on_top_of:
            raise SceneError(f"object {obj.id}: contained_in and on_top_of are mutually exclusive")
        if obj.articulated:
            if obj.articulation_state not in ("open", "closed"):
                raise SceneError(f"object {obj.id}: articulated objects must be open or closed")
        elif obj.articulation_state != "n/a":
            raise SceneError(f"object {obj.id}: non-articulated objects must have articulation_state n/a")
        parent = obj.contained_in or obj.on_top_of
        if parent is not None:
            if parent not in by_id:
                raise SceneError(f"object {obj.id}: unknown parent {parent}")
            if tuple(by_id[parent].position) != tuple(obj.position):
                raise SceneError(f"object {obj.id}: position must match parent {parent}")
    for obj in spec.objects:
        seen = {obj.id}
        cur = obj
        while (nxt := cur.contained_in or cur.on_top_of) is not None:
            if nxt in seen:
                raise SceneError("containment graph cyclic")
            seen.add(nxt)
            cur = by_id[nxt]

    free = spec.cells == CellKind.FREE
    for room in spec.room_annotations:
        mask = np.zeros_like(free)
        for x0, y0, x1, y1 in room.rects:
            mask[y0 : y1 + 1, x0 : x1 + 1] = True
        mask &= free
        if mask.any() and not _connected4(mask):
            raise SceneError(f"room {room.name}: free cells are not connected")


def _connected4(mask: np.ndarray) -> bool:
    from scipy import ndimage

    _, count = ndimage.label(mask)
    return count <= 1


def _spawn_candidates(spec: SceneSpec) -> list[Cell]:
    from scipy import ndimage

    free = spec.cells == CellKind.FREE
    occupied_floor = np.zeros_like(free)
    for obj in spec.objects:
        if obj.contained_in is None and obj.on_top_of is None:
            occupied_floor[obj.position[1], obj.position[0]] = True
    # two cells of clearance from anything that is not plain floor
    clear = ndimage.binary_erosion(free & ~occupied_floor, structure=np.ones((5, 5)), border_value=0)
    ys, xs = np.nonzero(clear)
    if len(xs) == 0:
        ys, xs = np.nonzero(free & ~occupied_floor)
    return [(int(x), int(y)) for y, x in zip(ys, xs)]


def load_scene(spec: SceneSpec, seed: int = 0) -> SimState:
    """Validate ``spec`` and place the robot on a seeded random free cell."""
    validate_scene(spec)
    rng = np.random.default_rng(seed)
    candidates = _spawn_candidates(spec)
    if not candidates:
        raise SceneError("scene has no free cell for the robot")
    cell = candidates[int(rng.integers(len(candidates)))]
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    robot = RobotState(position=cell_center(cell, spec.resolution_m), heading=heading)
    state = SimState(
        spec=spec,
        robot=robot,
        objects={o.id: copy.deepcopy(o) for o in spec.objects},
        doors={d.id: copy.deepcopy(d) for d in spec.doors},
    )
    return state


def state_to_dict(state: SimState) -> dict[str, Any]:
    """Canonical serialisation of the mutable part of a state."""
    return {
        "robot": {
            "position": [state.robot.position[0].hex(), state.robot.position[1].hex()],
            "heading": state.robot.heading.hex(),
            "gripper": state.robot.gripper,
        },
        "doors": {d.id: d.state for d in state.doors.values()},
        "objects": {
            o.id: {
                "position": list(o.position),
                "articulation_state": o.articulation_state,
                "contained_in": o.contained_in,
                "on_top_of": o.on_top_of,
            }
            for o in state.objects.values()
        },
    }


# ---------------------------------------------------------------------------
# ground-truth queries


def _top_level(obj: ObjectSpec) -> bool:
    return obj.contained_in is None and obj.on_top_of is None


def _static_categories(state: SimState) -> np.ndarray:
    if state._static_categories is None:
        spec = state.spec
        cats = np.where(spec.cells == CellKind.FREE, spec.floor_categories, "wall").astype(object)
        cats[spec.cells == CellKind.FURNITURE] = "furniture"
        for obj in spec.objects:
            x, y = obj.position
            if _top_level(obj) and spec.cells[y, x] == CellKind.FURNITURE:
                cats[y, x] = obj.category
        state._static_categories = cats
    return state._static_categories


def cell_categories(state: SimState) -> np.ndarray:
    """Ground-truth semantic category of every cell."""
    if state._category_cache is not None and state._category_cache[0] == state.version:
        return state._category_cache[1]
    cats = _static_categories(state).copy()
    for door in state.doors.values():
        x0, y0, x1, y1 = door.bbox
        cats[y0 : y1 + 1, x0 : x1 + 1] = DOORWAY if door.is_open else DOOR
    kinds = state.spec.cells
    for obj in state.objects.values():
        if obj.id == state.robot.gripper or not _top_level(obj):
            continue
        x, y = obj.position
        if kinds[y, x] == CellKind.FREE:
            cats[y, x] = obj.category
    state._category_cache = (state.version, cats)
    return cats


def traversable_mask(state: SimState) -> np.ndarray:
    kinds = state.spec.cells
    mask = kinds == CellKind.FREE
    for door in state.doors.values():
        if door.is_open:
            x0, y0, x1, y1 = door.bbox
            mask[y0 : y1 + 1, x0 : x1 + 1] = True
    return mask


def occluder_mask(state: SimState) -> np.ndarray:
    mask = state.spec.cells == CellKind.WALL
    for door in state.doors.values():
        if not door.is_open:
            x0, y0, x1, y1 = door.bbox
            mask[y0 : y1 + 1, x0 : x1 + 1] = True
    return mask


def world_relations(state: SimState) -> frozenset[tuple[str, ...]]:
    """Ground atoms ``inside(a,b)``, ``ontop(a,b)``, ``open(a)``, ``closed(a)``."""
    atoms: set[tuple[str, ...]] = set()
    for obj in state.objects.values():
        if obj.contained_in is not None:
            atoms.add(("inside", obj.id, obj.contained_in))
        if obj.on_top_of is not None:
            atoms.add(("ontop", obj.id, obj.on_top_of))
        if obj.articulated:
            atoms.add((obj.articulation_state, obj.id))
    for door in state.doors.values():
        atoms.add((door.state, door.id))
    return frozenset(atoms)


def object_categories(state: SimState) -> dict[str, str]:
    cats = {o.id: o.category for o in state.objects.values()}
    cats.update({d.id: DOOR for d in state.doors.values()})
    return cats


# ---------------------------------------------------------------------------
# sensing


class _RayTable:
    """Precomputed line-of-sight samples from a cell to every cell in range."""

    def __init__(self, radius_cells: float):
        r = int(math.ceil(radius_cells)) + 1
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        dx = dx.ravel()
        dy = dy.ravel()
        keep = np.hypot(dx, dy) <= radius_cells + 1.0
        self.dx = dx[keep].astype(np.int32)
        self.dy = dy[keep].astype(np.int32)
        dist = np.hypot(self.dx, self.dy)
        n_max = int(np.ceil(2 * dist.max())) + 1
        # samples at half-cell spacing strictly between origin and target;
        # padding repeats the origin, which never occludes
        t = np.arange(1, n_max) / (2.0 * np.maximum(dist, 1e-9))[:, None]
        inside = t < 1.0 - 1e-9
        sx = np.rint(self.dx[:, None] * t).astype(np.int32)
        sy = np.rint(self.dy[:, None] * t).astype(np.int32)
        # a sample that rounds onto the target itself does not occlude it
        on_target = (sx == self.dx[:, None]) & (sy == self.dy[:, None])
        inside &= ~on_target
        self.sx = np.where(inside, sx, 0)
        self.sy = np.where(inside, sy, 0)


_RAY_TABLES: dict[tuple[float, float], _RayTable] = {}


def _ray_table(range_m: float, resolution: float) -> _RayTable:
    key = (range_m, resolution)
    if key not in _RAY_TABLES:
        _RAY_TABLES[key] = _RayTable(range_m / resolution)
    return _RAY_TABLES[key]


def _angle_diff(a: np.ndarray | float, b: float) -> np.ndarray | float:
    return (a - b + np.pi) % (2 * np.pi) - np.pi


def sense(
    state: SimState, range_m: float = SENSOR_RANGE_M, fov: float = SENSOR_FOV
) -> Observation:
    """Reveal the cells and objects visible from the robot pose.

    A cell is revealed when its centre lies within ``range_m`` of the robot,
    inside the ``fov`` cone around the heading, and the straight ray from the
    robot's cell to it crosses no wall or closed door. Walls and closed doors
    in range are also revealed when a transparent cell next to them is. Objects inside a
    container are only visible when the container itself is visible and open.
    """
    spec = state.spec
    res = spec.resolution_m
    table = _ray_table(range_m, res)
    ox, oy = state.robot_cell()
    px, py = state.robot.position

    tx = ox + table.dx
    ty = oy + table.dy
    ok = (tx >= 0) & (tx < spec.width_cells) & (ty >= 0) & (ty < spec.height_cells)
    cx = (tx + 0.5) * res - px
    cy = (ty + 0.5) * res - py
    dist = np.hypot(cx, cy)
    ok &= dist <= range_m
    bearing = np.arctan2(cy, cx)
    in_cone = np.abs(_angle_diff(bearing, state.robot.heading)) <= fov / 2 + 1e-9
    own = (table.dx == 0) & (table.dy == 0)
    ok &= in_cone | own

    idx = np.nonzero(ok)[0]
    occ = occluder_mask(state)
    blocked = occ[oy + table.sy[idx], ox + table.sx[idx]].any(axis=1)
    # centre rays graze walls at shallow angles; a wall face counts as seen
    # when the transparent cell in front of it is seen
    clear = np.zeros(occ.shape, dtype=bool)
    clear[ty[idx[~blocked]], tx[idx[~blocked]]] = True
    clear &= ~occ
    near = np.zeros_like(clear)
    near[1:, :] |= clear[:-1, :]
    near[:-1, :] |= clear[1:, :]
    near[:, 1:] |= clear[:, :-1]
    near[:, :-1] |= clear[:, 1:]
    face = occ[ty[idx], tx[idx]] & near[ty[idx], tx[idx]]
    idx = idx[~blocked | face]
    xs = tx[idx]
    ys = ty[idx]
    cells = np.stack([xs, ys], axis=1)
    kinds = spec.cells[ys, xs]
    cats = cell_categories(state)[ys, xs]

    revealed = np.zeros(spec.cells.shape, dtype=bool)
    revealed[ys, xs] = True

    visible: dict[str, bool] = {}

    def is_visible(obj: ObjectSpec) -> bool:
        if obj.id in visible:
            return visible[obj.id]
        visible[obj.id] = False  # guards against malformed cycles
        if obj.id == state.robot.gripper:
            result = False
        elif obj.contained_in is not None:
            parent = state.objects[obj.contained_in]
            result = parent.articulation_state != "closed" and is_visible(parent)
        else:
            x, y = obj.position
            result = bool(revealed[y, x])
        visible[obj.id] = result
        return result

    views = [
        ObjectView(
            id=o.id,
            category=o.category,
            position=tuple(o.position),
            articulation_state=o.articulation_state,
            contained_in=o.contained_in,
            on_top_of=o.on_top_of,
            articulated=o.articulated,
            attributes=tuple(sorted(o.attributes.items())),
        )
        for o in sorted(state.objects.values(), key=lambda o: o.id)
        if is_visible(o)
    ]
    doors = [
        DoorView(d.id, tuple(d.bbox), d.state)
        for d in sorted(state.doors.values(), key=lambda d: d.id)
        if revealed[d.bbox[1] : d.bbox[3] + 1, d.bbox[0] : d.bbox[2] + 1].any()
    ]
    pose = (state.robot.position[0], state.robot.position[1], state.robot.heading)
    return Observation(cells, kinds, cats, views, doors, pose)


# ---------------------------------------------------------------------------
# actions


def _motion_traversable(state: SimState, cell: Cell) -> bool:
    spec = state.spec
    if not spec.in_bounds(cell):
        return False
    kind = spec.cells[cell[1], cell[0]]
    if kind == CellKind.FREE:
        return True
    if kind == CellKind.DOOR_FRAME:
        return any(d.is_open and _in_rect(cell, d.bbox) for d in state.doors.values())
    return False


def _in_rect(cell: Cell, rect: Rect) -> bool:
    return rect[0] <= cell[0] <= rect[2] and rect[1] <= cell[1] <= rect[3]


def step_motion(state: SimState, action: Motion) -> ActionResult:
    robot = state.robot
    if action.kind == "forward":
        x = robot.position[0] + FORWARD_STEP_M * math.cos(robot.heading)
        y = robot.position[1] + FORWARD_STEP_M * math.sin(robot.heading)
        if not _motion_traversable(state, position_to_cell((x, y), state.resolution)):
            return ActionResult(False, "blocked")
        robot.position = (x, y)
        state.version += 1
        return ActionResult(True, "", [copy.copy(robot)])
    if action.kind in ("turn_left", "turn_right"):
        if not 0.0 <= action.angle <= MAX_TURN + 1e-12:
            raise ValueError(f"turn angle {action.angle} outside [0, {MAX_TURN}]")
        sign = 1.0 if action.kind == "turn_left" else -1.0
        robot.heading = (robot.heading + sign * action.angle) % (2.0 * math.pi)
        return ActionResult(True, "", [copy.copy(robot)])
    raise ValueError(f"unknown motion {action.kind!r}")


def _accessible(state: SimState, obj: ObjectSpec) -> bool:
    cur = obj
    while cur.contained_in is not None:
        parent = state.objects[cur.contained_in]
        if parent.articulation_state == "closed":
            return False
        cur = parent
    return True


def _reach_distance(state: SimState, target: str) -> float:
    res = state.resolution
    if target in state.doors:
        rect = state.doors[target].bbox
    else:
        x, y = state.objects[target].position
        rect = (x, y, x, y)
    return _rect_distance(state.robot.position, rect, res)


def magic_interact(
    state: SimState, verb: Verb | str, target: str, reach_m: float = REACH_RADIUS_M
) -> ActionResult:
    """Apply a magic manipulation, or fail leaving the world untouched."""
    verb = Verb(verb)
    robot = state.robot
    if target not in state.objects and target not in state.doors:
        return ActionResult(False, "no such object")
    if _reach_distance(state, target) > reach_m:
        return ActionResult(False, "too far")

    if verb in (Verb.OPEN, Verb.CLOSE):
        want = "open" if verb == Verb.OPEN else "closed"
        if target in state.doors:
            entity: DoorSpec | ObjectSpec = state.doors[target]
            current = entity.state
        else:
            entity = state.objects[target]
            if not entity.articulated:
                return ActionResult(False, f"{target} cannot be opened or closed")
            if not _accessible(state, entity):
                return ActionResult(False, "container closed")
            current = entity.articulation_state
        if robot.gripper is not None:
            return ActionResult(False, "gripper full")
        if current == want:
            return ActionResult(False, f"already {want}")
        if isinstance(entity, DoorSpec):
            if want == "closed" and _in_rect(state.robot_cell(), entity.bbox):
                return ActionResult(False, "robot is in the doorway")
            entity.state = want
        else:
            entity.articulation_state = want
        state.version += 1
        return ActionResult(True, "", [copy.deepcopy(entity)])

    if target in state.doors:
        return ActionResult(False, f"cannot {verb.value} a door")
    obj = state.objects[target]

    if verb == Verb.GRASP:
        if robot.gripper is not None:
            return ActionResult(False, "gripper full")
        if obj.attributes.get("fixed"):
            return ActionResult(False, f"{target} cannot be grasped")
        if not _accessible(state, obj):
            return ActionResult(False, "container closed")
        if any(o.contained_in == target or o.on_top_of == target for o in state.objects.values()):
            return ActionResult(False, f"{target} supports other objects")
        obj.contained_in = None
        obj.on_top_of = None
        robot.gripper = target
        state.version += 1
        return ActionResult(True, "", [copy.deepcopy(obj), copy.copy(robot)])

    # placement
    if robot.gripper is None:
        return ActionResult(False, "gripper empty")
    if robot.gripper == target:
        return ActionResult(False, "cannot place an object on itself")
    if not _accessible(state, obj):
        return ActionResult(False, "container closed")
    held = state.objects[robot.gripper]
    if verb == Verb.PLACE_INSIDE:
        if obj.articulated and obj.articulation_state == "closed":
            return ActionResult(False, f"container closed: open {target} first")
        held.contained_in = target
    else:
        held.on_top_of = target
    held.position = tuple(obj.position)
    robot.gripper = None
    state.version += 1
    return ActionResult(True, "", [copy.deepcopy(held), copy.copy(robot)])
