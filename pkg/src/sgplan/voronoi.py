"""Navigational Voronoi graph: extraction, sparsification and door-based region separation."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from skimage.morphology import skeletonize

from .gridworld import DoorSpec, DoorView
from .mapping import BevMap, Esdf

Point = tuple[float, float]

DEFAULT_SPARSIFY_C = 1.0
SIGMA_FLOOR = 0.15
SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass
class VoronoiGraph:
    """Undirected simple graph with metric edge weights.

    ``components`` labels navigational connectivity as extracted from the map;
    ``regions`` labels connectivity after door edges were cut. ``paths`` keeps,
    for every edge ``(a, b)`` with ``a < b``, the intermediate points from ``a``
    to ``b`` that contracted edges stand for.
    """

    positions: dict[int, Point] = field(default_factory=dict)
    clearance: dict[int, float] = field(default_factory=dict)
    adj: dict[int, dict[int, float]] = field(default_factory=dict)
    paths: dict[tuple[int, int], list[Point]] = field(default_factory=dict)
    components: dict[int, int] = field(default_factory=dict)
    regions: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.positions)

    def add_node(self, node: int, position: Point, clearance: float = math.inf) -> None:
        self.positions[node] = position
        self.clearance[node] = clearance
        self.adj.setdefault(node, {})

    def add_edge(self, a: int, b: int, weight: float, path: Sequence[Point] | None = None) -> None:
        if a == b:
            raise ValueError("self-loops are not allowed")
        self.adj[a][b] = weight
        self.adj[b][a] = weight
        key = (a, b) if a < b else (b, a)
        pts = list(path or [])
        self.paths[key] = pts if a < b else pts[::-1]

    def remove_edge(self, a: int, b: int) -> None:
        del self.adj[a][b]
        del self.adj[b][a]
        self.paths.pop((a, b) if a < b else (b, a), None)

    def remove_node(self, node: int) -> None:
        for nb in list(self.adj[node]):
            self.remove_edge(node, nb)
        del self.adj[node]
        del self.positions[node]
        del self.clearance[node]
        self.components.pop(node, None)
        self.regions.pop(node, None)

    def degree(self, node: int) -> int:
        return len(self.adj[node])

    def nodes(self) -> list[int]:
        return sorted(self.positions)

    def edges(self) -> Iterator[tuple[int, int, float]]:
        for a in sorted(self.adj):
            for b, w in sorted(self.adj[a].items()):
                if a < b:
                    yield a, b, w

    def edge_count(self) -> int:
        return sum(len(n) for n in self.adj.values()) // 2

    def edge_path(self, a: int, b: int) -> list[Point]:
        """Polyline from ``a`` to ``b`` including both endpoints."""
        key = (a, b) if a < b else (b, a)
        inner = self.paths.get(key, [])
        if a > b:
            inner = inner[::-1]
        return [self.positions[a], *inner, self.positions[b]]

    def copy(self) -> "VoronoiGraph":
        return VoronoiGraph(
            dict(self.positions),
            dict(self.clearance),
            {k: dict(v) for k, v in self.adj.items()},
            {k: list(v) for k, v in self.paths.items()},
            dict(self.components),
            dict(self.regions),
        )

    def members(self, label: int, labels: Mapping[int, int] | None = None) -> list[int]:
        labels = self.components if labels is None else labels
        return sorted(n for n, c in labels.items() if c == label)


def connected_components(graph: VoronoiGraph) -> dict[int, int]:
    """Label connected components, numbered in order of their smallest node id."""
    labels: dict[int, int] = {}
    next_label = 0
    for start in graph.nodes():
        if start in labels:
            continue
        labels[start] = next_label
        stack = [start]
        while stack:
            node = stack.pop()
            for nb in graph.adj[node]:
                if nb not in labels:
                    labels[nb] = next_label
                    stack.append(nb)
        next_label += 1
    return labels


def _relabel(old: Mapping[int, int], nodes: Iterable[int]) -> dict[int, int]:
    groups: dict[int, int] = {}
    out: dict[int, int] = {}
    for node in sorted(nodes):
        label = old[node]
        if label not in groups:
            groups[label] = len(groups)
        out[node] = groups[label]
    return out


def extract_gvd(esdf: Esdf, bev: BevMap) -> VoronoiGraph:
    """Skeletonise known free space into an 8-connected graph.

    Node ids are linear cell indices ``y * width + x``. Diagonal links are
    only added when no shared 4-neighbour is itself a skeleton cell, which
    keeps junctions free of spurious triangles.
    """
    free = bev.free_mask()
    graph = VoronoiGraph()
    if not free.any():
        return graph
    skel = skeletonize(free)
    res = bev.resolution
    width = bev.width
    ys, xs = np.nonzero(skel)
    for x, y in zip(xs.tolist(), ys.tolist()):
        graph.add_node(y * width + x, ((x + 0.5) * res, (y + 0.5) * res), float(esdf.distance[y, x]))
    h, w = skel.shape
    diag = res * math.sqrt(2.0)
    for x, y in zip(xs.tolist(), ys.tolist()):
        a = y * width + x
        if x + 1 < w and skel[y, x + 1]:
            graph.add_edge(a, a + 1, res)
        if y + 1 < h and skel[y + 1, x]:
            graph.add_edge(a, a + width, res)
        for dx in (-1, 1):
            nx, ny = x + dx, y + 1
            if 0 <= nx < w and ny < h and skel[ny, nx] and not (skel[y, nx] or skel[ny, x]):
                graph.add_edge(a, ny * width + nx, diag)
    graph.components = connected_components(graph)
    graph.regions = dict(graph.components)
    return graph


def sparsify(graph: VoronoiGraph, c: float = DEFAULT_SPARSIFY_C) -> VoronoiGraph:
    """Contract degree-two nodes whose two incident weights sum below ``c``.

    Every node that has degree two in the input is visited once, in id
    order. A contraction that would duplicate an existing edge is skipped so
    the graph stays simple. Runs in O(|V|).
    """
    if c < 0:
        raise ValueError("c must be non-negative")
    out = graph.copy()
    degree_two = [n for n in out.nodes() if len(out.adj[n]) == 2]
    for x in degree_two:
        nbrs = out.adj[x]
        if len(nbrs) != 2:
            continue
        (v, w1), (u, w2) = nbrs.items()
        if not w1 + w2 < c:
            continue
        if u in out.adj[v]:
            continue
        path = out.edge_path(v, x)[1:] + out.edge_path(x, u)[1:-1]
        out.remove_edge(v, x)
        out.remove_edge(x, u)
        del out.adj[x]
        del out.positions[x]
        del out.clearance[x]
        out.add_edge(v, u, w1 + w2, path)
    out.components = _relabel(graph.components, out.positions)
    out.regions = _relabel(graph.regions, out.positions)
    return out


@dataclass(frozen=True)
class DoorKernel:
    door_id: str
    center: Point
    axis: Point  # unit vector along the door opening
    sigma_major: float
    sigma_minor: float

    @property
    def default_threshold(self) -> float:
        """Half the line integral of a full perpendicular crossing."""
        return 0.5 * self.sigma_minor * SQRT_2PI

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        ax = np.asarray(self.axis)
        along = d @ ax
        across = d @ np.array([-ax[1], ax[0]])
        return np.exp(-0.5 * ((along / self.sigma_major) ** 2 + (across / self.sigma_minor) ** 2))


def build_door_kernels(
    doors: Iterable[DoorView | DoorSpec], resolution: float, sigma_floor: float = SIGMA_FLOOR
) -> list[DoorKernel]:
    """One anisotropic Gaussian per door, sized by the door's bounding box."""
    kernels = []
    for door in sorted(doors, key=lambda d: d.id):
        x0, y0, x1, y1 = door.bbox
        w = (x1 - x0 + 1) * resolution
        h = (y1 - y0 + 1) * resolution
        center = ((x0 + x1 + 1) / 2.0 * resolution, (y0 + y1 + 1) / 2.0 * resolution)
        axis = (1.0, 0.0) if w >= h else (0.0, 1.0)
        kernels.append(kernel_from_extent(door.id, center, axis, max(w, h), min(w, h), sigma_floor))
    return kernels


def kernel_from_extent(
    door_id: str, center: Point, axis: Point, length_m: float, thickness_m: float, sigma_floor: float = SIGMA_FLOOR
) -> DoorKernel:
    return DoorKernel(
        door_id,
        center,
        axis,
        sigma_major=max(length_m / 2.0, sigma_floor),
        sigma_minor=max(thickness_m / 2.0, sigma_floor),
    )


def sample_polyline(points: Sequence[Point], step: float) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint samples of a polyline at spacing <= ``step`` and their arc-length weights."""
    samples: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    pts = np.asarray(points, dtype=float)
    for a, b in zip(pts[:-1], pts[1:]):
        length = float(np.hypot(*(b - a)))
        if length == 0.0:
            continue
        n = max(1, math.ceil(length / step - 1e-9))
        t = (np.arange(n) + 0.5) / n
        samples.append(a + t[:, None] * (b - a))
        weights.append(np.full(n, length / n))
    if not samples:
        return np.zeros((0, 2)), np.zeros(0)
    return np.concatenate(samples), np.concatenate(weights)


def edge_integral(
    graph: VoronoiGraph, a: int, b: int, kernels: Sequence[DoorKernel], step: float
) -> float:
    pts, ds = sample_polyline(graph.edge_path(a, b), step)
    if not kernels or len(ds) == 0:
        return 0.0
    total = sum(k.evaluate(pts) for k in kernels)
    return float(np.dot(total, ds))


def default_tau(kernels: Sequence[DoorKernel]) -> float:
    return min(k.default_threshold for k in kernels)


def separate_regions(
    graph: VoronoiGraph,
    kernels: Sequence[DoorKernel],
    tau: float | None = None,
    step: float = 0.075,
) -> VoronoiGraph:
    """Cut every edge whose line integral over the door kernels exceeds ``tau``.

    ``tau`` defaults to half the perpendicular-crossing integral of the
    thinnest kernel. Region labels become the connected components of what
    remains; navigational component labels are kept from the input.
    """
    out = graph.copy()
    if kernels:
        if tau is None:
            tau = default_tau(kernels)
        if not tau > 0:
            raise ValueError("tau must be positive")
        for a, b, _ in list(graph.edges()):
            if edge_integral(graph, a, b, kernels, step) > tau:
                out.remove_edge(a, b)
    out.regions = connected_components(out)
    return out


def closest_node(
    graph: VoronoiGraph,
    point: Sequence[float],
    component: int | None = None,
    labels: Mapping[int, int] | None = None,
) -> int | None:
    """Euclidean-nearest node, optionally within one component; ties go to the smaller id."""
    labels = graph.components if labels is None else labels
    best = None
    best_d = math.inf
    for node in graph.nodes():
        if component is not None and labels.get(node) != component:
            continue
        pos = graph.positions[node]
        d = math.hypot(pos[0] - point[0], pos[1] - point[1])
        if d < best_d:
            best, best_d = node, d
    return best


def nodes_within(graph: VoronoiGraph, point: Sequence[float], radius: float, minimum: int = 3) -> list[int]:
    """All nodes within ``radius`` of ``point``, topped up to the ``minimum`` nearest."""
    ranked = sorted(
        graph.nodes(),
        key=lambda n: (math.hypot(graph.positions[n][0] - point[0], graph.positions[n][1] - point[1]), n),
    )
    inside = [
        n for n in ranked
        if math.hypot(graph.positions[n][0] - point[0], graph.positions[n][1] - point[1]) <= radius
    ]
    if len(inside) < minimum:
        inside = ranked[:minimum]
    return sorted(inside)


def shortest_path_lengths(graph: VoronoiGraph, source: int) -> dict[int, float]:
    dist = {source: 0.0}
    heap = [(0.0, source)]
    while heap:
        d, node = heapq.heappop(heap)
        if d > dist[node]:
            continue
        for nb, w in graph.adj[node].items():
            nd = d + w
            if nd < dist.get(nb, math.inf):
                dist[nb] = nd
                heapq.heappush(heap, (nd, nb))
    return dist


def export_graph(graph: VoronoiGraph, path: str | Path | None = None) -> str:
    lines = ["[nodes]"]
    for n in graph.nodes():
        x, y = graph.positions[n]
        lines.append(f"{n} {x:.6f} {y:.6f} {graph.clearance[n]:.6f}")
    lines.append("[edges]")
    for a, b, w in graph.edges():
        lines.append(f"{a} {b} {w:.6f}")
    lines.append("[regions]")
    for n in graph.nodes():
        lines.append(f"{n} {graph.regions.get(n, -1)}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def import_graph(text: str) -> VoronoiGraph:
    graph = VoronoiGraph()
    section = None
    regions: dict[int, int] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            section = line
            continue
        parts = line.split()
        if section == "[nodes]":
            graph.add_node(int(parts[0]), (float(parts[1]), float(parts[2])), float(parts[3]))
        elif section == "[edges]":
            graph.add_edge(int(parts[0]), int(parts[1]), float(parts[2]))
        elif section == "[regions]":
            regions[int(parts[0])] = int(parts[1])
    graph.components = connected_components(graph)
    graph.regions = regions or dict(graph.components)
    return graph
