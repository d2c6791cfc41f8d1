"""Regenerate the bundled graphs in src/patrolkit/data/graphs.

demo4 and grid20 are hand-laid; map40 and map60 are relative neighbourhood graphs over
well-spread random points, with edge weights equal to Euclidean length.
"""

import itertools
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from patrolkit.graph import PatrolGraph, save_graph  # noqa: E402

OUT = Path(__file__).resolve().parents[1] / "src" / "patrolkit" / "data" / "graphs"


def euclid_graph(points, pairs):
    points = np.asarray(points, dtype=float)
    return PatrolGraph(points, tuple((u, v, round(float(np.linalg.norm(points[u] - points[v])), 2)) for u, v in pairs))


def demo4():
    points = [(0, 0), (10, 0), (10, 8), (0, 8)]
    return euclid_graph(points, [(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)])


def grid20(spacing=10.0):
    rows, cols = 4, 5
    points = [(c * spacing, r * spacing) for r in range(rows) for c in range(cols)]
    pairs = []
    for r, c in itertools.product(range(rows), range(cols)):
        i = r * cols + c
        if c + 1 < cols:
            pairs.append((i, i + 1))
        if r + 1 < rows:
            pairs.append((i, i + cols))
    # two walls, like a floor plan with rooms
    pairs.remove((6, 11))
    pairs.remove((8, 13))
    return euclid_graph(points, pairs)


def spread_points(n, side, min_sep, rng):
    points = []
    while len(points) < n:
        p = rng.uniform(0, side, size=2)
        if all(np.linalg.norm(p - q) >= min_sep for q in points):
            points.append(p)
    return np.array(points)


def relative_neighbourhood(points):
    n = len(points)
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    pairs = []
    for u, v in itertools.combinations(range(n), 2):
        others = np.delete(np.arange(n), [u, v])
        if np.all(np.maximum(d[u, others], d[v, others]) >= d[u, v]):
            pairs.append((u, v))
    return pairs


def random_map(n, seed):
    rng = np.random.default_rng(seed)
    side = 9.0 * np.sqrt(n)
    points = spread_points(n, side, 5.0, rng)
    return euclid_graph(points, relative_neighbourhood(points))


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, graph in [("demo4", demo4()), ("grid20", grid20()), ("map40", random_map(40, 40)),
                        ("map60", random_map(60, 60))]:
        assert graph.is_connected()
        save_graph(graph, OUT / f"{name}.json")
        w = [e[2] for e in graph.edges]
        print(f"{name}: {graph.n_vertices} vertices, {graph.n_edges} edges, weights {min(w):.1f}-{max(w):.1f}")
