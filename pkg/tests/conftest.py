from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
import pytest

from sgplan.gridworld import SceneSpec, SimState, load_scene, scene_from_dict
from sgplan.mapping import FREE, OCCUPIED, UNKNOWN, BevMap

LEGEND = {
    ".": {"kind": "free", "category": "floor"},
    "c": {"kind": "free", "category": "carpet"},
    "#": {"kind": "wall"},
    "F": {"kind": "furniture"},
    "D": {"kind": "door"},
}


def grid_scene(
    rows: Sequence[str],
    objects: Iterable[dict] = (),
    doors: Iterable[dict] = (),
    rooms: Iterable[dict] = (),
) -> SceneSpec:
    """Scene from ASCII rows ('.' floor, '#' wall, 'F' furniture, 'D' door frame)."""
    return scene_from_dict(
        {
            "schema_version": 1,
            "width_cells": len(rows[0]),
            "height_cells": len(rows),
            "legend": LEGEND,
            "rows": list(rows),
            "objects": list(objects),
            "doors": list(doors),
            "room_annotations": list(rooms),
        }
    )


def place(sim: SimState, cell: tuple[int, int], heading: float = 0.0) -> SimState:
    res = sim.resolution
    sim.robot.position = ((cell[0] + 0.5) * res, (cell[1] + 0.5) * res)
    sim.robot.heading = heading % (2 * math.pi)
    return sim


def open_room(width: int, height: int, objects: Iterable[dict] = ()) -> SceneSpec:
    rows = ["#" * width] + ["#" + "." * (width - 2) + "#" for _ in range(height - 2)] + ["#" * width]
    return grid_scene(rows, objects)


def bev_from_rows(rows: Sequence[str], resolution: float = 0.075) -> BevMap:
    """Map from ASCII rows: '.' free, '#' occupied, '?' unknown."""
    h, w = len(rows), len(rows[0])
    bev = BevMap.empty(w, h, resolution, ["floor"])
    code = {".": FREE, "#": OCCUPIED, "?": UNKNOWN}
    bev.state[:] = np.array([[code[ch] for ch in row] for row in rows], dtype=np.int8)
    bev.category[bev.state == FREE] = "floor"
    bev.category[bev.state == OCCUPIED] = "wall"
    return bev


def random_maze(width: int, height: int, seed: int, corridor: int = 3) -> np.ndarray:
    """Boolean free mask of a perfect maze with ``corridor``-cell passages (DFS carve)."""
    rng = np.random.default_rng(seed)
    cw, ch = width, height
    step = corridor + 1
    free = np.zeros((ch * step + 1, cw * step + 1), dtype=bool)
    seen = np.zeros((ch, cw), dtype=bool)
    stack = [(0, 0)]
    seen[0, 0] = True

    def carve(cx: int, cy: int) -> None:
        free[cy * step + 1 : cy * step + 1 + corridor, cx * step + 1 : cx * step + 1 + corridor] = True

    carve(0, 0)
    while stack:
        cx, cy = stack[-1]
        options = [
            (cx + dx, cy + dy)
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
            if 0 <= cx + dx < cw and 0 <= cy + dy < ch and not seen[cy + dy, cx + dx]
        ]
        if not options:
            stack.pop()
            continue
        nx, ny = options[int(rng.integers(len(options)))]
        seen[ny, nx] = True
        carve(nx, ny)
        x0 = min(cx, nx) * step + 1
        y0 = min(cy, ny) * step + 1
        if nx != cx:
            free[y0 : y0 + corridor, x0 : x0 + 2 * step - 1] = True
        else:
            free[y0 : y0 + 2 * step - 1, x0 : x0 + corridor] = True
        stack.append((nx, ny))
    return free


def bev_from_mask(free: np.ndarray, resolution: float = 0.075) -> BevMap:
    h, w = free.shape
    bev = BevMap.empty(w, h, resolution, ["floor"])
    bev.state[:] = np.where(free, FREE, OCCUPIED)
    bev.category[free] = "floor"
    bev.category[~free] = "wall"
    return bev


@pytest.fixture
def two_room():
    from sgplan.scenes import generate_scene

    return generate_scene("two-room", 0)


@pytest.fixture
def loaded_two_room(two_room):
    return load_scene(two_room, 0)
