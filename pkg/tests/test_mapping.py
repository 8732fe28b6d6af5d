from __future__ import annotations

import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgplan.gridworld import Verb, load_scene, magic_interact, sense
from sgplan.mapping import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    BevMap,
    compute_esdf,
    cost_field,
    find_frontiers,
    frontier_mask,
    integrate_observation,
    load_snapshot,
    path_cost,
    plan_path,
    save_snapshot,
)
from sgplan.scenes import generate_scene

from .conftest import bev_from_rows, grid_scene, place


def brute_esdf(state: np.ndarray, res: float) -> np.ndarray:
    occ = np.argwhere(state == OCCUPIED)
    out = np.full(state.shape, np.inf)
    if len(occ) == 0:
        return out
    for y in range(state.shape[0]):
        for x in range(state.shape[1]):
            out[y, x] = np.min(np.hypot(occ[:, 0] - y, occ[:, 1] - x)) * res
    return out


def nx_oracle(free: np.ndarray) -> nx.Graph:
    """Same move model built independently: 8-neighbours, no squeezing past blocked corners."""
    g = nx.Graph()
    h, w = free.shape
    for y in range(h):
        for x in range(w):
            if not free[y, x]:
                continue
            g.add_node((x, y))
            for dx, dy in ((1, 0), (0, 1), (1, 1), (-1, 1)):
                nx_, ny = x + dx, y + dy
                if not (0 <= nx_ < w and 0 <= ny < h) or not free[ny, nx_]:
                    continue
                if dx and dy and not (free[y, nx_] and free[ny, x]):
                    continue
                g.add_edge((x, y), (nx_, ny), weight=math.sqrt(2) if dx and dy else 1.0)
    return g


def test_integrate_reveals_exactly_the_observation():
    sim = load_scene(generate_scene("two-room", 0), 0)
    bev = BevMap.for_state(sim)
    obs = sense(sim)
    out = integrate_observation(bev, obs, 1)
    assert out.known_count() == len(obs.cells)
    assert bev.known_count() == 0  # functional update
    again = integrate_observation(out, obs, 1)
    assert np.array_equal(again.state, out.state)
    assert np.array_equal(again.category, out.category)


def test_moved_object_cell_becomes_free():
    rows = ["#######", "#.....#", "#.....#", "#######"]
    spec = grid_scene(rows, objects=[{"id": "apple_1", "category": "apple", "position": [3, 1]}])
    sim = place(load_scene(spec, 0), (1, 1), 0.0)
    bev = integrate_observation(BevMap.for_state(sim), sense(sim), 1)
    assert bev.state[1, 3] == OCCUPIED and bev.category[1, 3] == "apple"
    sim.robot.position = (2.5 * sim.resolution, 1.5 * sim.resolution)
    assert magic_interact(sim, Verb.GRASP, "apple_1").success
    bev = integrate_observation(bev, sense(sim), 2)
    assert bev.state[1, 3] == FREE


def test_knowledge_is_monotone_over_a_spin():
    sim = load_scene(generate_scene("corridor-maze", 0), 0)
    bev = BevMap.for_state(sim)
    counts = []
    for k in range(11):
        sim.robot.heading = (k * math.radians(35)) % (2 * math.pi)
        bev = integrate_observation(bev, sense(sim), k)
        counts.append(bev.known_count())
    assert counts == sorted(counts)


def test_esdf_single_obstacle_matches_brute_force():
    bev = bev_from_rows(["." * 20] * 20)
    bev.state[10, 10] = OCCUPIED
    esdf = compute_esdf(bev)
    assert np.allclose(esdf.distance, brute_esdf(bev.state, 0.075))
    assert esdf.distance[10, 13] == pytest.approx(3 * 0.075)
    assert esdf.distance[13, 14] == pytest.approx(5 * 0.075)


def test_esdf_without_obstacles_is_infinite():
    esdf = compute_esdf(bev_from_rows(["...."] * 3))
    assert np.isinf(esdf.distance).all()


def test_esdf_corridor_centerline():
    # walls on rows 0 and 4, corridor rows 1-3: centre-to-centre distance is two cells
    bev = bev_from_rows(["#" * 9, "." * 9, "." * 9, "." * 9, "#" * 9])
    esdf = compute_esdf(bev)
    assert esdf.distance[2, 4] == pytest.approx(2 * 0.075)
    assert esdf.distance[2, 4] == brute_esdf(bev.state, 0.075)[2, 4]


def test_unknown_cells_are_not_obstacles():
    bev = bev_from_rows(["#????", "....."])
    assert compute_esdf(bev).distance[1, 4] == pytest.approx(math.hypot(4, 1) * 0.075)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_esdf_oracle_and_lipschitz(seed):
    rng = np.random.default_rng(seed)
    state = rng.choice([FREE, OCCUPIED, UNKNOWN], size=(12, 12), p=[0.7, 0.15, 0.15]).astype(np.int8)
    bev = bev_from_rows(["." * 12] * 12)
    bev.state[:] = state
    d = compute_esdf(bev).distance
    assert np.allclose(d, brute_esdf(state, 0.075))
    if np.isfinite(d).all():
        assert (d[state == OCCUPIED] == 0).all()
        assert (np.abs(np.diff(d, axis=0)) <= 0.075 + 1e-12).all()
        assert (np.abs(np.diff(d, axis=1)) <= 0.075 + 1e-12).all()


def test_no_frontiers_on_fully_known_map():
    assert find_frontiers(bev_from_rows(["#..#", "...."])) == []


def test_disk_frontier_is_its_boundary_ring():
    n = 21
    yy, xx = np.mgrid[:n, :n]
    disk = (xx - 10) ** 2 + (yy - 10) ** 2 <= 36
    bev = bev_from_rows(["?" * n] * n)
    bev.state[disk] = FREE
    frontiers = find_frontiers(bev)
    assert len(frontiers) == 1
    ring = {(int(x), int(y)) for y, x in np.argwhere(frontier_mask(bev))}
    assert set(frontiers[0].cells) == ring
    assert frontiers[0].centroid == (10, 10)


def test_two_rooms_with_unknown_corridor_give_two_frontiers():
    rows = [
        "##########????##########",
        "#........#????#........#",
        "#.........????.........#",
        "#........#????#........#",
        "##########????##########",
    ]
    frontiers = find_frontiers(bev_from_rows(rows))
    assert len(frontiers) == 2
    assert [f.cells for f in frontiers] == [[(9, 2)], [(14, 2)]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_frontier_soundness_and_completeness(seed):
    rng = np.random.default_rng(seed)
    bev = bev_from_rows(["." * 15] * 15)
    bev.state[:] = rng.choice([FREE, OCCUPIED, UNKNOWN], size=(15, 15), p=[0.5, 0.2, 0.3])
    frontiers = find_frontiers(bev)
    cells = [c for f in frontiers for c in f.cells]
    assert len(cells) == len(set(cells))
    unknown = np.pad(bev.state == UNKNOWN, 1)
    expected = set()
    for y in range(15):
        for x in range(15):
            near = unknown[y, x + 1] or unknown[y + 2, x + 1] or unknown[y + 1, x] or unknown[y + 1, x + 2]
            if bev.state[y, x] == FREE and near:
                expected.add((x, y))
    assert set(cells) == expected


def test_straight_corridor_path():
    bev = bev_from_rows(["#" * 14, "." * 14, "#" * 14])
    path = plan_path(bev, (1, 1), (11, 1))
    assert len(path) - 1 == 10 and path_cost(path) == 10


def test_walled_off_goal_is_unreachable():
    bev = bev_from_rows([".....", "..###", "..#.#", "..###"])
    assert plan_path(bev, (0, 0), (3, 2)) is None
    assert plan_path(bev, (0, 0), (2, 2)) is None  # goal not free


def test_no_corner_cutting():
    bev = bev_from_rows([".#", "#."])
    assert plan_path(bev, (0, 0), (1, 1)) is None


def test_astar_matches_dijkstra_oracle():
    rng = np.random.default_rng(1234)
    free = rng.random((30, 30)) > 0.25
    bev = bev_from_rows(["." * 30] * 30)
    bev.state[:] = np.where(free, FREE, OCCUPIED)
    graph = nx_oracle(free)
    cells = [tuple(int(v) for v in c[::-1]) for c in np.argwhere(free)]
    for _ in range(100):
        start = cells[int(rng.integers(len(cells)))]
        goal = cells[int(rng.integers(len(cells)))]
        path = plan_path(bev, start, goal)
        try:
            expected = nx.dijkstra_path_length(graph, start, goal)
        except nx.NetworkXNoPath:
            assert path is None
            continue
        assert path is not None and path[0] == start and path[-1] == goal
        assert path_cost(path) == pytest.approx(expected, abs=1e-9)
        for a, b in zip(path, path[1:]):
            assert graph.has_edge(a, b)
        field = cost_field(free, start)
        assert field[goal[1], goal[0]] == pytest.approx(expected, abs=1e-9)


def test_plan_path_is_deterministic():
    bev = bev_from_rows(["." * 12] * 12)
    assert plan_path(bev, (0, 0), (11, 7)) == plan_path(bev.copy(), (0, 0), (11, 7))


def test_snapshot_round_trip(tmp_path):
    sim = load_scene(generate_scene("two-room", 0), 0)
    bev = integrate_observation(BevMap.for_state(sim), sense(sim), 4)
    pgm, side = save_snapshot(bev, tmp_path / "snap")
    assert pgm.read_bytes().startswith(b"P5\n92 50\n255\n")
    back = load_snapshot(tmp_path / "snap")
    assert np.array_equal(back.state, bev.state)
    assert np.array_equal(back.last_seen, bev.last_seen)
    assert (back.category == bev.category).all()
