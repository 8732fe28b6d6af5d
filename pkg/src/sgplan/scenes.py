"""Procedural fixture scenes and the bundled task suite."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .gridworld import (
    DEFAULT_FREE_SPACE,
    CellKind,
    DoorSpec,
    ObjectSpec,
    Rect,
    RoomAnnotation,
    SceneSpec,
    validate_scene,
)


class SceneBuilder:
    """Carves rooms out of solid wall and furnishes them."""

    def __init__(self, name: str, width: int, height: int, resolution: float = 0.075):
        self.name = name
        self.resolution = resolution
        self.cells = np.full((height, width), CellKind.WALL, dtype=np.int8)
        self.floor = np.full((height, width), "", dtype=object)
        self.doors: list[DoorSpec] = []
        self.objects: list[ObjectSpec] = []
        self.rooms: list[RoomAnnotation] = []

    def room(self, name: str, label: str, rect: Rect, floor: str = "floor") -> None:
        x0, y0, x1, y1 = rect
        self.cells[y0 : y1 + 1, x0 : x1 + 1] = CellKind.FREE
        self.floor[y0 : y1 + 1, x0 : x1 + 1] = floor
        # rooms own half of each two-cell wall around them
        self.rooms.append(RoomAnnotation(name, label, [(x0 - 1, y0 - 1, x1 + 1, y1 + 1)]))

    def paint(self, rect: Rect, floor: str) -> None:
        x0, y0, x1, y1 = rect
        region = self.cells[y0 : y1 + 1, x0 : x1 + 1] == CellKind.FREE
        self.floor[y0 : y1 + 1, x0 : x1 + 1][region] = floor

    def door(self, door_id: str, rect: Rect, state: str = "open") -> None:
        x0, y0, x1, y1 = rect
        self.cells[y0 : y1 + 1, x0 : x1 + 1] = CellKind.DOOR_FRAME
        self.doors.append(DoorSpec(door_id, rect, state))

    def furniture(
        self,
        obj_id: str,
        category: str,
        rect: Rect,
        articulated: bool = False,
        state: str = "closed",
        **attributes: Any,
    ) -> None:
        x0, y0, x1, y1 = rect
        self.cells[y0 : y1 + 1, x0 : x1 + 1] = CellKind.FURNITURE
        attributes.setdefault("fixed", True)
        self.objects.append(
            ObjectSpec(
                id=obj_id,
                category=category,
                position=((x0 + x1) // 2, (y0 + y1) // 2),
                articulated=articulated,
                articulation_state=state if articulated else "n/a",
                attributes=attributes,
            )
        )

    def item(self, obj_id: str, category: str, parent: str, relation: str = "ontop", **attributes: Any) -> None:
        base = next(o for o in self.objects if o.id == parent)
        self.objects.append(
            ObjectSpec(
                id=obj_id,
                category=category,
                position=base.position,
                contained_in=parent if relation == "inside" else None,
                on_top_of=parent if relation == "ontop" else None,
                attributes=attributes,
            )
        )

    def build(self) -> SceneSpec:
        h, w = self.cells.shape
        spec = SceneSpec(
            width_cells=w,
            height_cells=h,
            cells=self.cells.copy(),
            floor_categories=self.floor.copy(),
            resolution_m=self.resolution,
            free_space_categories=frozenset(DEFAULT_FREE_SPACE),
            doors=copy.deepcopy(self.doors),
            objects=copy.deepcopy(self.objects),
            room_annotations=copy.deepcopy(self.rooms),
            name=self.name,
        )
        validate_scene(spec)
        return spec


def _two_room(seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    b = SceneBuilder("two-room", 92, 50)
    b.room("kitchen", "kitchen", (2, 2, 44, 47))
    b.room("living_room", "living room", (47, 2, 89, 47), floor="carpet")
    b.door("door_1", (45, 19, 46, 30))

    b.furniture("fridge_1", "fridge", (2, 2, 7, 7), articulated=True)
    b.furniture("counter_1", "counter", (18, 2, 31, 6))
    b.furniture("sink_1", "sink", (34, 2, 40, 5))
    b.furniture("oven_1", "oven", (2, 20, 5, 26))
    b.furniture("table_1", "table", (18, 30, 27, 36))
    b.furniture("cabinet_1", "cabinet", (2, 40, 7, 47), articulated=True)

    b.furniture("sofa_1", "sofa", (60, 42, 75, 47))
    b.furniture("coffee_table_1", "coffee_table", (62, 24, 71, 29))
    b.furniture("tv_1", "tv", (60, 2, 72, 4))
    b.furniture("chair_1", "chair", (80, 18, 83, 21))
    b.furniture("chair_2", "chair", (80, 30, 83, 33))
    b.furniture("shelf_1", "shelf", (86, 8, 89, 20))

    surfaces = ["counter_1", "table_1", "coffee_table_1"]
    n_beer = 2 + int(rng.integers(2))
    for i in range(n_beer):
        b.item(f"beer_bottle_{i + 1}", "beer_bottle", surfaces[int(rng.integers(len(surfaces)))])
    b.item("apple_1", "apple", ["coffee_table_1", "shelf_1"][int(rng.integers(2))])
    b.item("book_1", "book", "shelf_1")
    b.item("bowl_1", "bowl", "cabinet_1", relation="inside")
    b.item("mug_1", "mug", "table_1")
    return b.build()


def _corridor_maze(seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    b = SceneBuilder("corridor-maze", 120, 70)
    b.room("corridor", "corridor", (2, 2, 117, 17))
    b.room("kitchen", "kitchen", (2, 20, 38, 67))
    b.room("bedroom", "bedroom", (41, 20, 78, 67), floor="carpet")
    b.room("bathroom", "bathroom", (81, 20, 117, 67))
    b.door("door_kitchen", (14, 18, 25, 19))
    b.door("door_bedroom", (54, 18, 65, 19))
    b.door("door_bathroom", (93, 18, 104, 19))

    b.furniture("coat_rack_1", "coat_rack", (112, 2, 117, 5))
    b.furniture("shoe_rack_1", "shoe_rack", (40, 2, 49, 4))

    b.furniture("fridge_1", "fridge", (2, 62, 7, 67), articulated=True)
    b.furniture("stove_1", "stove", (2, 40, 6, 47))
    b.furniture("table_1", "table", (18, 44, 27, 50))
    b.furniture("counter_1", "counter", (28, 62, 38, 67))

    b.furniture("bed_1", "bed", (60, 50, 78, 67))
    b.furniture("wardrobe_1", "wardrobe", (41, 58, 46, 67), articulated=True)
    b.furniture("desk_1", "desk", (70, 24, 78, 29))
    b.furniture("nightstand_1", "nightstand", (55, 62, 58, 67))

    b.furniture("toilet_1", "toilet", (112, 60, 117, 67))
    b.furniture("bathtub_1", "bathtub", (81, 54, 96, 67))
    b.furniture("shelf_1", "shelf", (112, 30, 117, 40))
    b.furniture("sink_1", "sink", (100, 64, 106, 67))

    b.item("milk_1", "milk", "fridge_1", relation="inside")
    b.item("apple_1", "apple", "counter_1")
    towel_spots = ["bed_1", "desk_1", "nightstand_1", "table_1"]
    picks = rng.choice(len(towel_spots), size=2, replace=False)
    for i, k in enumerate(sorted(int(p) for p in picks)):
        b.item(f"towel_{i + 1}", "towel", towel_spots[k])
    b.item("cup_1", "cup", ["desk_1", "nightstand_1"][int(rng.integers(2))])
    b.item("shirt_1", "shirt", "wardrobe_1", relation="inside")
    return b.build()


def _indoor_outdoor(seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    b = SceneBuilder("indoor-outdoor", 120, 76)
    b.room("kitchen", "kitchen", (2, 2, 57, 41))
    b.room("living_room", "living room", (60, 2, 117, 41), floor="carpet")
    b.room("garden", "garden/outdoor", (2, 44, 117, 73), floor="lawn")
    b.paint((90, 44, 105, 73), "driveway")
    b.door("door_1", (58, 15, 59, 26))
    b.door("gate_1", (20, 42, 31, 43), state="closed")

    b.furniture("fridge_1", "fridge", (2, 2, 7, 7), articulated=True)
    b.furniture("oven_1", "oven", (20, 2, 25, 5))
    b.furniture("table_1", "table", (30, 18, 39, 24))
    b.furniture("sofa_1", "sofa", (80, 36, 95, 41))
    b.furniture("coffee_table_1", "coffee_table", (82, 18, 91, 23))
    b.furniture("tv_1", "tv", (100, 2, 112, 4))

    b.furniture("tree_1", "tree", (40, 55, 45, 60))
    b.furniture("bench_1", "bench", (64, 68, 75, 73))
    b.furniture("trash_can_1", "trash_can", (113, 66, 117, 73), articulated=True)
    b.furniture("flower_pot_1", "flower_pot", (2, 68, 6, 73))

    b.item("ball_1", "ball", "bench_1")
    spots = ["bench_1", "flower_pot_1", "coffee_table_1"]
    n = 2 + int(rng.integers(2))
    for i in range(n):
        b.item(f"plastic_bottle_{i + 1}", "plastic_bottle", spots[int(rng.integers(len(spots)))])
    b.item("plate_1", "plate", "table_1")
    return b.build()


TEMPLATES: dict[str, Callable[[int], SceneSpec]] = {
    "two-room": _two_room,
    "corridor-maze": _corridor_maze,
    "indoor-outdoor": _indoor_outdoor,
}


def generate_scene(template: str, seed: int = 0, overrides: dict[str, Any] | None = None) -> SceneSpec:
    """Build a template scene, then apply door/articulation state overrides."""
    try:
        factory = TEMPLATES[template]
    except KeyError:
        raise ValueError(f"unknown template {template!r}; choose from {sorted(TEMPLATES)}") from None
    spec = factory(seed)
    for entity_id, value in (overrides or {}).items():
        door = next((d for d in spec.doors if d.id == entity_id), None)
        if door is not None:
            door.state = value
            continue
        obj = next(o for o in spec.objects if o.id == entity_id)
        obj.articulation_state = value
    validate_scene(spec)
    return spec


@dataclass
class SuiteEntry:
    template: str
    seed: int
    task: dict[str, Any]
    overrides: dict[str, str] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.task["name"]

    def scene(self) -> SceneSpec:
        return generate_scene(self.template, self.seed, self.overrides)


def _task(name: str, template: str, bindings: dict[str, str], goals: list[str]) -> dict[str, Any]:
    return {
        "name": name,
        "description_template": template,
        "bindings": bindings,
        "goal_conditions": goals,
    }


def bundled_suite() -> list[SuiteEntry]:
    fridge = {"electric_refrigerator.n.01_1": "fridge_1"}
    return [
        SuiteEntry(
            "two-room",
            1,
            _task(
                "store_beer",
                "store all beer bottles in $electric_refrigerator.n.01_1",
                fridge,
                ["forall beer_bottle inside $electric_refrigerator.n.01_1"],
            ),
        ),
        SuiteEntry(
            "two-room",
            2,
            _task(
                "apple_to_table",
                "put $apple.n.01_1 on the kitchen table $table.n.02_1",
                {"apple.n.01_1": "apple_1", "table.n.02_1": "table_1"},
                ["ontop($apple.n.01_1, $table.n.02_1)"],
            ),
        ),
        SuiteEntry(
            "two-room",
            3,
            _task("open_cabinet", "open the cabinet $cabinet.n.01_1", {"cabinet.n.01_1": "cabinet_1"},
                  ["open($cabinet.n.01_1)"]),
        ),
        SuiteEntry(
            "two-room",
            4,
            _task("close_fridge", "close the fridge $electric_refrigerator.n.01_1", fridge,
                  ["closed($electric_refrigerator.n.01_1)"]),
            overrides={"fridge_1": "open"},
        ),
        SuiteEntry(
            "two-room",
            5,
            _task(
                "fetch_book",
                "bring the book $book.n.01_1 to the kitchen table $table.n.02_1",
                {"book.n.01_1": "book_1", "table.n.02_1": "table_1"},
                ["ontop($book.n.01_1, $table.n.02_1)"],
            ),
            overrides={"door_1": "closed"},
        ),
        SuiteEntry(
            "corridor-maze",
            1,
            _task(
                "towels_to_shelf",
                "put all towels on the bathroom shelf $shelf.n.01_1",
                {"shelf.n.01_1": "shelf_1"},
                ["forall towel ontop $shelf.n.01_1"],
            ),
        ),
        SuiteEntry(
            "corridor-maze",
            2,
            _task(
                "cup_in_sink",
                "put the cup $cup.n.01_1 into the sink $sink.n.01_1",
                {"cup.n.01_1": "cup_1", "sink.n.01_1": "sink_1"},
                ["inside($cup.n.01_1, $sink.n.01_1)"],
            ),
            overrides={"door_bedroom": "closed"},
        ),
        SuiteEntry(
            "corridor-maze",
            3,
            _task(
                "milk_out_of_fridge",
                "take the milk $milk.n.01_1 out of the fridge and put it on the table $table.n.02_1",
                {"milk.n.01_1": "milk_1", "table.n.02_1": "table_1"},
                ["ontop($milk.n.01_1, $table.n.02_1)"],
            ),
        ),
        SuiteEntry(
            "indoor-outdoor",
            1,
            _task(
                "ball_inside",
                "bring the ball $ball.n.01_1 from the garden onto the sofa $sofa.n.01_1",
                {"ball.n.01_1": "ball_1", "sofa.n.01_1": "sofa_1"},
                ["ontop($ball.n.01_1, $sofa.n.01_1)"],
            ),
        ),
        SuiteEntry(
            "indoor-outdoor",
            2,
            _task(
                "throw_away_bottles",
                "throw all plastic bottles into the trash can $ashcan.n.01_1",
                {"ashcan.n.01_1": "trash_can_1"},
                ["forall plastic_bottle inside $ashcan.n.01_1"],
            ),
            overrides={"gate_1": "open"},
        ),
        SuiteEntry(
            "indoor-outdoor",
            3,
            _task("close_gate", "close the garden gate $gate.n.01_1", {"gate.n.01_1": "gate_1"},
                  ["closed($gate.n.01_1)"]),
            overrides={"gate_1": "open"},
        ),
    ]
