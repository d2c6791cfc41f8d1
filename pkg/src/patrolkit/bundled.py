"""Bundled graphs and trained weights, addressable by short name."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

GRAPH_NAMES = ("demo4", "grid20", "map40", "map60")
WEIGHT_NAMES = ("sun", "mns")


def _data_path(*parts) -> Path:
    return Path(str(resources.files("patrolkit").joinpath("data", *parts)))


def graph_path(name: str) -> Path:
    if name not in GRAPH_NAMES:
        raise KeyError(f"no bundled graph {name!r}; available: {', '.join(GRAPH_NAMES)}")
    return _data_path("graphs", f"{name}.json")


def weights_path(name: str) -> Path:
    if name not in WEIGHT_NAMES:
        raise KeyError(f"no bundled weights {name!r}; available: {', '.join(WEIGHT_NAMES)}")
    return _data_path("weights", f"{name}.json")


def resolve_map(spec):
    """Load a graph from a file path or a bundled graph name."""
    from .graph import GraphError, load_graph

    if Path(spec).is_file():
        return load_graph(spec)
    if spec in GRAPH_NAMES:
        return load_graph(graph_path(spec))
    raise GraphError(f"map {spec!r} is neither a file nor a bundled graph ({', '.join(GRAPH_NAMES)})")


def resolve_weights(spec):
    """Load a network from a weight file path or a bundled name (``sun`` / ``mns``)."""
    from .neural import ArchitectureError, load_weights

    if Path(spec).is_file():
        return load_weights(spec)
    if spec in WEIGHT_NAMES:
        return load_weights(weights_path(spec))
    raise ArchitectureError(f"weights {spec!r} is neither a file nor bundled ({', '.join(WEIGHT_NAMES)})")
