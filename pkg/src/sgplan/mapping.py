"""Agent-side bird's-eye-view map: integration, ESDF, frontiers and A*."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .gridworld import DOORWAY, Cell, DoorView, Observation, SimState, cell_categories

UNKNOWN = 0
FREE = 1
OCCUPIED = 2

SQRT2 = math.sqrt(2.0)


@dataclass
class BevMap:
    width: int
    height: int
    resolution: float
    free_space_categories: frozenset[str]
    state: np.ndarray
    category: np.ndarray
    last_seen: np.ndarray
    doors: dict[str, DoorView] = field(default_factory=dict)

    @classmethod
    def empty(
        cls, width: int, height: int, resolution: float, free_space_categories: Iterable[str]
    ) -> "BevMap":
        return cls(
            width=width,
            height=height,
            resolution=resolution,
            free_space_categories=frozenset(free_space_categories),
            state=np.zeros((height, width), dtype=np.int8),
            category=np.full((height, width), None, dtype=object),
            last_seen=np.full((height, width), -1, dtype=np.int64),
        )

    @classmethod
    def for_state(cls, sim: SimState) -> "BevMap":
        spec = sim.spec
        return cls.empty(spec.width_cells, spec.height_cells, spec.resolution_m, spec.free_space_categories)

    def copy(self) -> "BevMap":
        return BevMap(
            self.width,
            self.height,
            self.resolution,
            self.free_space_categories,
            self.state.copy(),
            self.category.copy(),
            self.last_seen.copy(),
            dict(self.doors),
        )

    def known_count(self) -> int:
        return int(np.count_nonzero(self.state != UNKNOWN))

    def is_free(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and self.state[y, x] == FREE

    def free_mask(self) -> np.ndarray:
        return self.state == FREE

    def is_free_category(self, category: str) -> bool:
        return category in self.free_space_categories or category == DOORWAY


@dataclass
class Esdf:
    distance: np.ndarray  # meters; +inf when no obstacle is known
    resolution: float

    def at(self, cell: Cell) -> float:
        return float(self.distance[cell[1], cell[0]])


@dataclass
class Frontier:
    cells: list[Cell]
    centroid: Cell
    region_id: str | None = None

    def anchor(self) -> Cell:
        """Member cell closest to the centroid (the centroid may lie off the frontier)."""
        cx, cy = self.centroid
        return min(self.cells, key=lambda c: ((c[0] - cx) ** 2 + (c[1] - cy) ** 2, c[1], c[0]))


def integrate_observation(bev: BevMap, obs: Observation, step: int = 0) -> BevMap:
    """Merge an observation; re-observed cells take the newest semantics."""
    out = bev.copy()
    if len(obs.cells):
        xs = obs.cells[:, 0]
        ys = obs.cells[:, 1]
        cats = obs.categories
        free = np.fromiter((out.is_free_category(c) for c in cats), dtype=bool, count=len(cats))
        out.state[ys, xs] = np.where(free, FREE, OCCUPIED)
        out.category[ys, xs] = cats
        out.last_seen[ys, xs] = step
    for door in obs.visible_doors:
        out.doors[door.id] = door
    return out


def ground_truth_map(sim: SimState) -> BevMap:
    """A map in which every cell is known; used as a test oracle and for fixtures."""
    bev = BevMap.for_state(sim)
    cats = cell_categories(sim)
    free = np.vectorize(bev.is_free_category, otypes=[bool])(cats)
    bev.state[:] = np.where(free, FREE, OCCUPIED)
    bev.category[:] = cats
    bev.last_seen[:] = 0
    for door in sim.doors.values():
        bev.doors[door.id] = DoorView(door.id, tuple(door.bbox), door.state)
    return bev


def compute_esdf(bev: BevMap) -> Esdf:
    """Exact Euclidean distance (cell centre to cell centre) to the nearest Occupied cell.

    Unknown cells do not count as obstacles.
    """
    occupied = bev.state == OCCUPIED
    if not occupied.any():
        return Esdf(np.full(occupied.shape, np.inf), bev.resolution)
    dist = ndimage.distance_transform_edt(~occupied) * bev.resolution
    return Esdf(dist, bev.resolution)


def frontier_mask(bev: BevMap) -> np.ndarray:
    unknown = bev.state == UNKNOWN
    near = np.zeros_like(unknown)
    near[1:, :] |= unknown[:-1, :]
    near[:-1, :] |= unknown[1:, :]
    near[:, 1:] |= unknown[:, :-1]
    near[:, :-1] |= unknown[:, 1:]
    return (bev.state == FREE) & near


def find_frontiers(bev: BevMap) -> list[Frontier]:
    """Maximal 8-connected clusters of free cells bordering unknown space."""
    mask = frontier_mask(bev)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    frontiers = []
    for k in range(1, count + 1):
        ys, xs = np.nonzero(labels == k)
        cells = sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))
        cx, cy = float(xs.mean()), float(ys.mean())
        frontiers.append((cy, cx, cells))
    frontiers.sort(key=lambda f: (f[0], f[1], f[2][0][1], f[2][0][0]))
    return [Frontier(cells, (int(round(cx)), int(round(cy)))) for cy, cx, cells in frontiers]


_MOVES = (
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, SQRT2),
    (1, -1, SQRT2),
    (-1, 1, SQRT2),
    (-1, -1, SQRT2),
)


def _octile(a: Cell, b: Cell) -> float:
    dx = abs(a[0] - b[0])
    dy = abs(a[1] - b[1])
    return (SQRT2 - 1.0) * min(dx, dy) + max(dx, dy)


def _neighbors(free: np.ndarray, cell: Cell):
    h, w = free.shape
    x, y = cell
    for dx, dy, cost in _MOVES:
        nx, ny = x + dx, y + dy
        if not (0 <= nx < w and 0 <= ny < h) or not free[ny, nx]:
            continue
        # no corner cutting past blocked cells
        if dx and dy and not (free[y, nx] and free[ny, x]):
            continue
        yield (nx, ny), cost


def plan_path(bev: BevMap, start: Cell, goal: Cell, free: np.ndarray | None = None) -> list[Cell] | None:
    """Shortest 8-connected path over Free cells, or ``None`` when unreachable.

    Diagonal steps cost sqrt(2) and may not cut a blocked corner. Ties are
    broken on (f, h, y, x) so the result is deterministic.
    """
    if free is None:
        free = bev.free_mask()
    if not (0 <= goal[0] < free.shape[1] and 0 <= goal[1] < free.shape[0]) or not free[goal[1], goal[0]]:
        return None
    if start == goal:
        return [start]
    free = free.copy()
    free[start[1], start[0]] = True
    g = {start: 0.0}
    parent: dict[Cell, Cell] = {}
    h0 = _octile(start, goal)
    heap = [(h0, h0, start[1], start[0])]
    closed: set[Cell] = set()
    while heap:
        _, _, y, x = heapq.heappop(heap)
        cell = (x, y)
        if cell in closed:
            continue
        if cell == goal:
            path = [cell]
            while cell in parent:
                cell = parent[cell]
                path.append(cell)
            return path[::-1]
        closed.add(cell)
        base = g[cell]
        for nxt, cost in _neighbors(free, cell):
            if nxt in closed:
                continue
            cand = base + cost
            if cand < g.get(nxt, math.inf) - 1e-12:
                g[nxt] = cand
                parent[nxt] = cell
                h = _octile(nxt, goal)
                heapq.heappush(heap, (cand + h, h, nxt[1], nxt[0]))
    return None


def path_cost(path: list[Cell]) -> float:
    """Length of a cell path in cell units."""
    total = 0.0
    for a, b in zip(path, path[1:]):
        total += SQRT2 if a[0] != b[0] and a[1] != b[1] else 1.0
    return total


def cost_field(free: np.ndarray, start: Cell) -> np.ndarray:
    """Dijkstra costs (cell units) from ``start`` to every cell under the A* move model."""
    free = free.copy()
    free[start[1], start[0]] = True
    dist = np.full(free.shape, np.inf)
    dist[start[1], start[0]] = 0.0
    heap = [(0.0, start[1], start[0])]
    while heap:
        d, y, x = heapq.heappop(heap)
        if d > dist[y, x]:
            continue
        for (nx, ny), cost in _neighbors(free, (x, y)):
            nd = d + cost
            if nd < dist[ny, nx] - 1e-12:
                dist[ny, nx] = nd
                heapq.heappush(heap, (nd, ny, nx))
    return dist


def save_snapshot(bev: BevMap, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.pgm`` (occupancy) and ``<stem>.json`` (semantics)."""
    stem = Path(stem)
    pgm = stem.with_suffix(".pgm")
    side = stem.with_suffix(".json")
    grey = np.choose(bev.state, [205, 254, 0]).astype(np.uint8)
    header = f"P5\n{bev.width} {bev.height}\n255\n".encode()
    pgm.write_bytes(header + grey.tobytes())
    ys, xs = np.nonzero(bev.state != UNKNOWN)
    sidecar = {
        "resolution_m": bev.resolution,
        "width": bev.width,
        "height": bev.height,
        "free_space_categories": sorted(bev.free_space_categories),
        "cells": [[int(x), int(y), bev.category[y, x], int(bev.last_seen[y, x])] for y, x in zip(ys, xs)],
        "doors": [{"id": d.id, "bbox": list(d.bbox), "state": d.state} for d in bev.doors.values()],
    }
    side.write_text(json.dumps(sidecar))
    return pgm, side


def load_snapshot(stem: str | Path) -> BevMap:
    stem = Path(stem)
    data = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".pgm").read_bytes()
    bev = BevMap.empty(data["width"], data["height"], data["resolution_m"], data["free_space_categories"])
    pixels = np.frombuffer(raw[-bev.width * bev.height :], dtype=np.uint8).reshape(bev.height, bev.width)
    bev.state[pixels == 254] = FREE
    bev.state[pixels == 0] = OCCUPIED
    for x, y, cat, seen in data["cells"]:
        bev.category[y, x] = cat
        bev.last_seen[y, x] = seen
    for d in data["doors"]:
        bev.doors[d["id"]] = DoorView(d["id"], tuple(d["bbox"]), d["state"])
    return bev
