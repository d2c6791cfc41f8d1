"""Patrol graphs, all-pairs shortest paths, random graph generation and graph files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    """Raised for graphs that violate patrol-graph invariants or cannot be parsed."""


@dataclass(frozen=True, eq=False)
class PatrolGraph:
    """Weighted undirected patrol graph.

    Vertices are the integers ``0 .. n-1``. ``edges`` holds each undirected
    edge once as ``(u, v, weight)`` with ``u < v``, sorted.
    """

    positions: np.ndarray
    edges: tuple[tuple[int, int, float], ...]
    weights: np.ndarray = field(init=False, repr=False)
    adjacency: np.ndarray = field(init=False, repr=False)
    neighbors: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        n = len(positions)
        if n == 0:
            raise GraphError("graph has no vertices")
        seen = {}
        for u, v, w in self.edges:
            u, v, w = int(u), int(v), float(w)
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"edge ({u}, {v}) references a missing vertex")
            if u == v:
                raise GraphError(f"self-loop at vertex {u}")
            if not (w > 0 and math.isfinite(w)):
                raise GraphError(f"edge ({u}, {v}) has non-positive weight {w}")
            key = (min(u, v), max(u, v))
            if key in seen:
                if seen[key] != w:
                    raise GraphError(f"edge {key} listed twice with different weights ({seen[key]} and {w})")
                raise GraphError(f"duplicate edge {key}")
            seen[key] = w
        edges = tuple(sorted((u, v, w) for (u, v), w in seen.items()))

        weights = np.zeros((n, n))
        for u, v, w in edges:
            weights[u, v] = weights[v, u] = w
        adjacency = weights > 0
        positions.setflags(write=False)
        weights.setflags(write=False)
        adjacency.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "neighbors", tuple(tuple(np.flatnonzero(row).tolist()) for row in adjacency))

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def weight(self, u: int, v: int) -> float:
        w = self.weights[u, v]
        if w == 0:
            raise GraphError(f"no edge between {u} and {v}")
        return float(w)

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Both orientations of every edge as ``(src, dst, weight)`` arrays."""
        if not self.edges:
            empty = np.zeros(0, dtype=int)
            return empty, empty, np.zeros(0)
        e = np.array(self.edges)
        u, v, w = e[:, 0].astype(int), e[:, 1].astype(int), e[:, 2]
        return np.concatenate([u, v]), np.concatenate([v, u]), np.concatenate([w, w])

    def is_connected(self) -> bool:
        seen = {0}
        stack = [0]
        while stack:
            for j in self.neighbors[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.n_vertices

    def __eq__(self, other):
        if not isinstance(other, PatrolGraph):
            return NotImplemented
        return self.edges == other.edges and np.array_equal(self.positions, other.positions)

    def __hash__(self):
        return hash(self.edges)

    def to_dict(self) -> dict:
        return {
            "vertices": [{"id": i, "x": float(x), "y": float(y)} for i, (x, y) in enumerate(self.positions)],
            "edges": [{"u": u, "v": v, "weight": w} for u, v, w in self.edges],
        }

    @classmethod
    def from_dict(cls, data: dict) -> PatrolGraph:
        try:
            vertices = sorted(data["vertices"], key=lambda item: item["id"])
            ids = [int(item["id"]) for item in vertices]
            if ids != list(range(len(ids))):
                raise GraphError("vertex ids must be consecutive integers from 0")
            positions = [(float(item["x"]), float(item["y"])) for item in vertices]
            edges = [(int(e["u"]), int(e["v"]), float(e["weight"])) for e in data["edges"]]
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed graph data: {exc!r}") from exc
        graph = cls(np.array(positions).reshape(-1, 2), tuple(edges))
        if not graph.is_connected():
            raise GraphError("graph is not connected")
        return graph


@dataclass(frozen=True)
class DistanceMatrix:
    """All-pairs shortest-path lengths and first hops.

    ``next_hop[i, j]`` is the first vertex after ``i`` on a shortest path to
    ``j`` (``i`` itself when ``i == j``).
    """

    d: np.ndarray
    next_hop: np.ndarray

    def path(self, i: int, j: int) -> list[int]:
        path = [i]
        while i != j:
            i = int(self.next_hop[i, j])
            path.append(i)
        return path


def shortest_paths(graph: PatrolGraph) -> DistanceMatrix:
    """Floyd-Warshall distances plus next hops with lowest-id tie-breaking."""
    n = graph.n_vertices
    d = np.where(graph.adjacency, graph.weights, np.inf)
    np.fill_diagonal(d, 0.0)
    # The relaxation is symmetric term by term, so d stays exactly symmetric.
    for k in range(n):
        np.minimum(d, d[:, k, None] + d[None, k, :], out=d)
    unreachable = np.argwhere(~np.isfinite(d))
    if len(unreachable):
        i, j = unreachable[0]
        raise GraphError(f"graph is disconnected: vertex {j} unreachable from vertex {i}")

    next_hop = np.full((n, n), -1, dtype=int)
    np.fill_diagonal(next_hop, np.arange(n))
    for i in range(n):
        for nb in graph.neighbors[i]:  # ascending, so the first match is the lowest id
            via = graph.weights[i, nb] + d[nb]
            match = (next_hop[i] < 0) & (via <= d[i] * (1 + 1e-12) + 1e-12)
            next_hop[i, match] = nb
    d.setflags(write=False)
    next_hop.setflags(write=False)
    return DistanceMatrix(d, next_hop)


def _random_tree(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniform random labelled tree via a random Pruefer sequence."""
    if n == 1:
        return []
    if n == 2:
        return [(0, 1)]
    seq = rng.integers(0, n, size=n - 2).tolist()
    degree = [1] * n
    for x in seq:
        degree[x] += 1
    edges = []
    for x in seq:
        leaf = next(i for i in range(n) if degree[i] == 1)
        edges.append((min(leaf, x), max(leaf, x)))
        degree[leaf] -= 1
        degree[x] -= 1
    u, v = (i for i in range(n) if degree[i] == 1)
    edges.append((u, v))
    return edges


def generate_random_graph(n_vertices: int, n_edges: int, min_edge: float, max_edge: float,
                          seed: int) -> PatrolGraph:
    """Random connected graph: uniform spanning tree plus uniformly sampled extra edges.

    Edge weights are uniform in ``[min_edge, max_edge]``. Vertex positions are
    sampled in a square box and do not influence the weights.
    """
    n = int(n_vertices)
    if n < 1:
        raise GraphError("n_vertices must be at least 1")
    if n_edges < n - 1:
        raise GraphError(f"{n_edges} edges cannot connect {n} vertices")
    if n_edges > n * (n - 1) // 2:
        raise GraphError(f"{n_edges} edges exceed the {n * (n - 1) // 2} possible pairs of {n} vertices")
    if not 0 < min_edge <= max_edge:
        raise GraphError(f"need 0 < min_edge <= max_edge, got {min_edge}, {max_edge}")

    rng = np.random.default_rng(seed)
    pairs = _random_tree(n, rng)
    taken = set(pairs)
    remaining = [(u, v) for u in range(n) for v in range(u + 1, n) if (u, v) not in taken]
    extra = n_edges - len(pairs)
    if extra:
        picks = rng.choice(len(remaining), size=extra, replace=False)
        pairs.extend(remaining[i] for i in sorted(picks))
    weights = rng.uniform(min_edge, max_edge, size=len(pairs))
    side = 10.0 * math.sqrt(n)
    positions = rng.uniform(0.0, side, size=(n, 2))
    return PatrolGraph(positions, tuple((u, v, float(w)) for (u, v), w in zip(pairs, weights)))


def graph_to_json(graph: PatrolGraph) -> str:
    return json.dumps(graph.to_dict(), indent=1)


def save_graph(graph: PatrolGraph, path) -> None:
    Path(path).write_text(graph_to_json(graph) + "\n")


def load_graph(path) -> PatrolGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return PatrolGraph.from_dict(data)
    except GraphError as exc:
        raise GraphError(f"{path}: {exc}") from exc
