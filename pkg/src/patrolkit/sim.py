"""Deterministic time-stepped patrol simulation with lossy broadcasts.

Within a tick the engine (1) moves agents in index order, (2) handles
arrivals in index order, each arrival deciding a new target and
broadcasting it, (3) advances true idleness and (4) logs. Broadcasts are
delivered as soon as they are sent, so later arrivals in the same tick
already see them. Overshoot past a vertex is discarded: an agent that
arrives waits there for the rest of the tick.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bundled import resolve_map, resolve_weights
from .graph import PatrolGraph, save_graph, shortest_paths
from .strategies import STRATEGY_NAMES, AgentBelief, Broadcast, make_strategy, on_broadcast


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    map: str = "demo4"
    strategy: str = "sebs"
    weights: str | None = None
    n_agents: int = 1
    duration: float = 3600.0
    dt: float = 1.0
    agent_speed: float = 1.0
    msg_fail_prob: float = 0.0
    seed: int = 0
    start_vertices: list[int] | None = None

    def validate(self, n_vertices: int | None = None) -> None:
        if self.strategy not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.n_agents < 1:
            raise ConfigError("n_agents must be at least 1")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.agent_speed > 0:
            raise ConfigError("agent_speed must be positive")
        steps = self.duration / self.dt
        if self.duration < 0 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError(f"duration {self.duration} is not a non-negative multiple of dt {self.dt}")
        if not 0.0 <= self.msg_fail_prob <= 1.0:
            raise ConfigError(f"msg_fail_prob must lie in [0, 1], got {self.msg_fail_prob}")
        if self.start_vertices is not None:
            if len(self.start_vertices) != self.n_agents:
                raise ConfigError(f"{len(self.start_vertices)} start vertices given for {self.n_agents} agents")
            if n_vertices is not None and any(not 0 <= v < n_vertices for v in self.start_vertices):
                raise ConfigError(f"start vertices {self.start_vertices} outside 0..{n_vertices - 1}")

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.dt))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SimConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SimLog:
    """Per-tick record of a run.

    Agent positions: ``agent_from == agent_to`` means the agent stands on
    that vertex; otherwise it is ``agent_offset`` metres from ``agent_from``
    along the edge to ``agent_to``. ``visits`` rows are ``(t, agent, vertex)``.
    """

    times: np.ndarray
    idleness: np.ndarray
    agent_from: np.ndarray
    agent_to: np.ndarray
    agent_offset: np.ndarray
    agent_target: np.ndarray
    visits: np.ndarray
    decisions: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_ticks(self) -> int:
        return len(self.times)

    @property
    def n_vertices(self) -> int:
        return self.idleness.shape[1]

    @property
    def n_agents(self) -> int:
        return self.agent_from.shape[1]

    def slice(self, start: int, stop: int) -> SimLog:
        """Ticks ``start:stop`` as a new log (visits filtered to that time span)."""
        times = self.times[start:stop]
        keep = (self.visits[:, 0] >= times[0]) & (self.visits[:, 0] <= times[-1]) if len(times) else []
        return SimLog(times, self.idleness[start:stop], self.agent_from[start:stop], self.agent_to[start:stop],
                      self.agent_offset[start:stop], self.agent_target[start:stop], self.visits[keep])

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        t = self.times[:, None]
        n, a = self.n_vertices, self.n_agents
        np.savetxt(directory / "idleness.csv", np.hstack([t, self.idleness]), fmt="%.12g", delimiter=",",
                   header=",".join(["t"] + [f"v{i}" for i in range(n)]), comments="")
        cols = [t]
        names = ["t"]
        fmts = ["%.12g"]
        for i in range(a):
            cols += [self.agent_from[:, i, None], self.agent_to[:, i, None], self.agent_offset[:, i, None],
                     self.agent_target[:, i, None]]
            names += [f"a{i}_from", f"a{i}_to", f"a{i}_offset", f"a{i}_target"]
            fmts += ["%d", "%d", "%.12g", "%d"]
        np.savetxt(directory / "agents.csv", np.hstack(cols), fmt=fmts, delimiter=",", header=",".join(names),
                   comments="")
        np.savetxt(directory / "visits.csv", self.visits.reshape(-1, 3), fmt=["%.12g", "%d", "%d"], delimiter=",",
                   header="t,agent,vertex", comments="")

    @classmethod
    def load(cls, directory) -> SimLog:
        directory = Path(directory)
        try:
            idle = np.loadtxt(directory / "idleness.csv", delimiter=",", skiprows=1, ndmin=2)
            agents = np.loadtxt(directory / "agents.csv", delimiter=",", skiprows=1, ndmin=2)
            visits = np.loadtxt(directory / "visits.csv", delimiter=",", skiprows=1, ndmin=2).reshape(-1, 3)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read simulation log in {directory}: {exc}") from exc
        if (agents.shape[1] - 1) % 4 or len(agents) != len(idle):
            raise ConfigError(f"{directory}: agents.csv does not match idleness.csv")
        per = agents[:, 1:].reshape(len(agents), -1, 4)
        return cls(idle[:, 0], idle[:, 1:], per[:, :, 0].astype(int), per[:, :, 1].astype(int), per[:, :, 2],
                   per[:, :, 3].astype(int), visits)


def deliver(msg: Broadcast, receivers, p_f: float, rng: np.random.Generator) -> dict[int, bool]:
    """Independent Bernoulli(1 - p_f) delivery per receiver; the sender never hears itself."""
    others = [r for r in receivers if r != msg.sender]
    draws = rng.random(len(others))
    return {r: bool(u >= p_f) for r, u in zip(others, draws)}


def advance_idleness(idleness: np.ndarray, dt: float, visited=()) -> np.ndarray:
    out = np.asarray(idleness, dtype=float) + dt
    out[list(visited)] = 0.0
    return out


def _start_vertices(config: SimConfig, n: int, rng: np.random.Generator) -> list[int]:
    if config.start_vertices is not None:
        return [int(v) for v in config.start_vertices]
    return rng.choice(n, size=config.n_agents, replace=config.n_agents > n).tolist()


def run(config: SimConfig, graph: PatrolGraph | None = None, weights=None, distances=None,
        record_decisions: bool = False) -> SimLog:
    """Simulate ``config``. ``graph`` and ``weights`` override the config's map and weight file.

    With ``record_decisions`` every decision appends
    ``(t, agent, vertex, belief_idleness, true_idleness)`` to ``SimLog.decisions``.
    """
    graph = graph if graph is not None else resolve_map(config.map)
    config.validate(graph.n_vertices)
    distances = distances if distances is not None else shortest_paths(graph)
    if weights is None and config.strategy in ("suns", "mns"):
        if config.weights is None:
            raise ConfigError(f"strategy {config.strategy!r} needs a weight file")
        weights = resolve_weights(config.weights)

    start_seq, msg_seq, strat_seq = np.random.SeedSequence(config.seed).spawn(3)
    msg_rng = np.random.default_rng(msg_seq)
    strategy = make_strategy(config.strategy, graph, distances, weights=weights,
                             rng=np.random.default_rng(strat_seq))
    n, a_count = graph.n_vertices, config.n_agents
    starts = _start_vertices(config, n, np.random.default_rng(start_seq))
    beliefs = [AgentBelief.fresh(i, n, v) for i, v in enumerate(starts)]
    agents = list(range(a_count))
    dt, step = config.dt, config.agent_speed * config.dt

    src = np.array(starts)
    dst = src.copy()
    steps_on_edge = np.zeros(a_count, dtype=int)
    target = np.zeros(a_count, dtype=int)
    idle = np.zeros(n)
    idle_now = idle  # true idleness as seen mid-tick, for decision tracing

    t_count = config.n_ticks + 1
    log_idle = np.empty((t_count, n))
    log_from = np.empty((t_count, a_count), dtype=int)
    log_to = np.empty((t_count, a_count), dtype=int)
    log_off = np.empty((t_count, a_count))
    log_target = np.empty((t_count, a_count), dtype=int)
    visits = []
    decisions = []

    def arrive(agent, vertex, t):
        msg = strategy.on_arrival(beliefs[agent], vertex, t)
        if record_decisions:
            decisions.append((t, agent, vertex, beliefs[agent].idleness_estimate.copy(), idle_now.copy()))
        target[agent] = msg.next
        for receiver, ok in deliver(msg, agents, config.msg_fail_prob, msg_rng).items():
            if ok:
                on_broadcast(beliefs[receiver], msg)

    def record(k):
        log_idle[k] = idle
        log_target[k] = target
        for i in agents:
            log_from[k, i] = src[i]
            log_to[k, i] = dst[i]
            log_off[k, i] = steps_on_edge[i] * step if src[i] != dst[i] else 0.0

    for i in agents:
        visits.append((0.0, i, starts[i]))
        idle_now = idle.copy()
        idle_now[starts[i]] = 0.0
        arrive(i, starts[i], 0.0)
    record(0)

    for k in range(1, t_count):
        t = k * dt
        arrivals = []
        for i in agents:
            if src[i] == dst[i]:
                src[i], dst[i] = dst[i], target[i]
                steps_on_edge[i] = 0
            steps_on_edge[i] += 1
            if steps_on_edge[i] * step >= graph.weights[src[i], dst[i]] * (1 - 1e-12):
                src[i] = dst[i]
                steps_on_edge[i] = 0
                arrivals.append(i)
        idle_now = idle + dt
        for i in arrivals:
            v = int(dst[i])
            visits.append((t, i, v))
            idle_now[v] = 0.0
            arrive(i, v, t)
        idle = advance_idleness(idle, dt, [int(dst[i]) for i in arrivals])
        record(k)

    return SimLog(np.arange(t_count) * dt, log_idle, log_from, log_to, log_off, log_target,
                  np.array(visits, dtype=float).reshape(-1, 3), decisions)


def save_run(log: SimLog, config: SimConfig, graph: PatrolGraph, directory) -> Path:
    """Write logs plus ``config.json`` and a copy of the graph, enough to reproduce the run."""
    directory = Path(directory)
    log.save(directory)
    save_graph(graph, directory / "graph.json")
    (directory / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")
    return directory


def load_run(directory):
    """Return ``(log, config, graph)`` from a run directory."""
    from .graph import load_graph

    directory = Path(directory)
    config = SimConfig.from_dict(json.loads((directory / "config.json").read_text()))
    return SimLog.load(directory), config, load_graph(directory / "graph.json")

