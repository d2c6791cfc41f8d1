"""Per-agent decision rules and the shared belief / intention bookkeeping.

All utility-based rules pick among the neighbours of the agent's current
vertex. Neighbours announced as targets by other agents get utility 0,
unless every neighbour is announced, in which case nothing is masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import DistanceMatrix, PatrolGraph
from .neural import EdgeIndex, MnsNetwork, SunNetwork, load_weights, mns_forward, sun_forward_cached

STRATEGY_NAMES = ("suns", "mns", "sebs", "random")


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class Broadcast:
    sender: int
    current: int
    next: int
    timestamp: float


@dataclass
class AgentBelief:
    """One agent's view of the patrol: last known visit times and others' intentions.

    The idleness estimate is derived from ``last_visit`` and ``now``, so it is
    reconstructed exactly whenever the clock is advanced.
    """

    agent_id: int
    last_visit: np.ndarray
    current_vertex: int
    target_vertex: int | None = None
    intentions: dict[int, int] = field(default_factory=dict)
    now: float = 0.0

    @classmethod
    def fresh(cls, agent_id: int, n_vertices: int, start: int) -> AgentBelief:
        return cls(agent_id, np.zeros(n_vertices), start)

    @property
    def idleness_estimate(self) -> np.ndarray:
        return self.now - self.last_visit

    def copy(self) -> AgentBelief:
        return AgentBelief(self.agent_id, self.last_visit.copy(), self.current_vertex, self.target_vertex,
                           dict(self.intentions), self.now)


def on_broadcast(belief: AgentBelief, msg: Broadcast) -> AgentBelief:
    """Apply a received message in place and return the belief."""
    belief.last_visit[msg.current] = max(belief.last_visit[msg.current], msg.timestamp)
    belief.intentions[msg.sender] = msg.next
    return belief


def masked_argmax(neighbors, utilities, intentions) -> int:
    """Greedy choice over ``neighbors`` with intention masking and lowest-id ties.

    ``utilities`` is aligned with ``neighbors``.
    """
    if not neighbors:
        raise StrategyError("current vertex has no neighbours")
    util = np.array(utilities, dtype=float)
    intended = set(intentions.values()) if isinstance(intentions, dict) else set(intentions)
    mask = np.array([n in intended for n in neighbors])
    if not mask.all():
        util[mask] = 0.0
    return int(neighbors[int(np.argmax(util))])   # neighbours are ascending, argmax takes the first max


def _signal(belief: AgentBelief, distances: DistanceMatrix) -> np.ndarray:
    return np.stack([belief.idleness_estimate, distances.d[belief.current_vertex]], axis=-1)


def suns_decide(belief: AgentBelief, graph: PatrolGraph, distances: DistanceMatrix, sun: SunNetwork,
                index: EdgeIndex | None = None) -> int:
    index = index or EdgeIndex.of(graph)
    utilities = sun_forward_cached(sun, index, _signal(belief, distances)[None])[0][0]
    neighbors = graph.neighbors[belief.current_vertex]
    return masked_argmax(neighbors, utilities[list(neighbors)], belief.intentions)


def mns_decide(belief: AgentBelief, graph: PatrolGraph, distances: DistanceMatrix, mns: MnsNetwork) -> int:
    neighbors = list(graph.neighbors[belief.current_vertex])
    utilities = mns_forward(mns, _signal(belief, distances)[neighbors]) if neighbors else []
    return masked_argmax(neighbors, utilities, belief.intentions)


def sebs_like_decide(belief: AgentBelief, graph: PatrolGraph, distances: DistanceMatrix) -> int:
    neighbors = list(graph.neighbors[belief.current_vertex])
    idle = belief.idleness_estimate[neighbors]
    utilities = idle / graph.weights[belief.current_vertex, neighbors]
    return masked_argmax(neighbors, utilities, belief.intentions)


def random_walk_decide(belief: AgentBelief, graph: PatrolGraph, rng: np.random.Generator) -> int:
    neighbors = graph.neighbors[belief.current_vertex]
    if not neighbors:
        raise StrategyError("current vertex has no neighbours")
    return int(neighbors[rng.integers(len(neighbors))])


class Strategy:
    """Binds a decision rule to a graph so the engine can call ``decide(belief)``."""

    name = "base"

    def __init__(self, graph: PatrolGraph, distances: DistanceMatrix):
        self.graph = graph
        self.distances = distances

    def decide(self, belief: AgentBelief) -> int:
        raise NotImplementedError

    def on_arrival(self, belief: AgentBelief, vertex: int, time: float) -> Broadcast:
        """Mark the vertex visited, pick the next target and build the announcement."""
        belief.now = time
        belief.current_vertex = vertex
        belief.last_visit[vertex] = time
        target = self.decide(belief)
        belief.target_vertex = target
        return Broadcast(belief.agent_id, vertex, target, time)


class SunsStrategy(Strategy):
    name = "suns"

    def __init__(self, graph, distances, sun: SunNetwork):
        super().__init__(graph, distances)
        self.sun = sun
        self.index = EdgeIndex.of(graph)

    def decide(self, belief):
        return suns_decide(belief, self.graph, self.distances, self.sun, self.index)


class MnsStrategy(Strategy):
    name = "mns"

    def __init__(self, graph, distances, mns: MnsNetwork):
        super().__init__(graph, distances)
        self.mns = mns

    def decide(self, belief):
        return mns_decide(belief, self.graph, self.distances, self.mns)


class SebsLikeStrategy(Strategy):
    name = "sebs"

    def decide(self, belief):
        return sebs_like_decide(belief, self.graph, self.distances)


class RandomWalkStrategy(Strategy):
    name = "random"

    def __init__(self, graph, distances, rng: np.random.Generator):
        super().__init__(graph, distances)
        self.rng = rng

    def decide(self, belief):
        return random_walk_decide(belief, self.graph, self.rng)


def on_arrival(belief: AgentBelief, vertex: int, time: float, strategy: Strategy) -> Broadcast:
    return strategy.on_arrival(belief, vertex, time)


def make_strategy(name: str, graph: PatrolGraph, distances: DistanceMatrix, *, weights=None,
                  rng: np.random.Generator | None = None) -> Strategy:
    """Build a strategy by name. ``weights`` is a network or a weight-file path."""
    if name in ("suns", "mns"):
        if weights is None:
            raise StrategyError(f"strategy {name!r} needs a weight file")
        net = weights if isinstance(weights, (SunNetwork, MnsNetwork)) else load_weights(weights, expect=name.replace("suns", "sun"))
        if name == "suns":
            if not isinstance(net, SunNetwork):
                raise StrategyError("suns needs SUN weights")
            return SunsStrategy(graph, distances, net)
        if not isinstance(net, MnsNetwork):
            raise StrategyError("mns needs MNS weights")
        return MnsStrategy(graph, distances, net)
    if name == "sebs":
        return SebsLikeStrategy(graph, distances)
    if name == "random":
        return RandomWalkStrategy(graph, distances, rng if rng is not None else np.random.default_rng(0))
    raise StrategyError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGY_NAMES)}")
