"""Learning adversary that watches the patrol and scores the team's success probability.

The adversary sees idleness and every agent's position. It bins each
(tick, vertex) by idleness, distance of the nearest agent and that agent's
approach direction, learns from the first part of a log how often each
bin is followed by ``attack_duration`` seconds without a visit, and then
attacks the rest of the log only from the most promising bins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import DistanceMatrix, PatrolGraph

log = logging.getLogger(__name__)

APPROACHING, STATIC, RECEDING = 0, 1, 2


class AdversaryError(ValueError):
    pass


@dataclass(frozen=True)
class AdversaryFeatures:
    """Observations per tick: ``idleness (T, n)``, ``distance (T, A, n)``, ``velocity (T, A, n)``.

    ``velocity`` is the rate at which an agent closes in on a vertex, i.e.
    minus the change of its distance per second (0 on the first tick).
    """

    times: np.ndarray
    idleness: np.ndarray
    distance: np.ndarray
    velocity: np.ndarray

    @property
    def n_ticks(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 1.0

    def nearest(self) -> tuple[np.ndarray, np.ndarray]:
        """Distance and velocity of the nearest agent to each vertex, ``(T, n)`` each."""
        who = self.distance.argmin(axis=1)
        dist = np.take_along_axis(self.distance, who[:, None, :], axis=1)[:, 0]
        vel = np.take_along_axis(self.velocity, who[:, None, :], axis=1)[:, 0]
        return dist, vel


def agent_distances(graph: PatrolGraph, distances: DistanceMatrix, src, dst, offset) -> np.ndarray:
    """Graph distance from agents to every vertex; inputs are ``(T, A)`` position arrays.

    An agent ``offset`` metres from ``src`` along edge ``(src, dst)`` reaches
    ``x`` through whichever endpoint is shorter.
    """
    src, dst = np.asarray(src, dtype=int), np.asarray(dst, dtype=int)
    offset = np.asarray(offset, dtype=float)
    d = distances.d
    on_vertex = src == dst
    w = graph.weights[src, dst]
    via_src = offset[..., None] + d[src]
    via_dst = (w - offset)[..., None] + d[dst]
    return np.where(on_vertex[..., None], d[src], np.minimum(via_src, via_dst))


def extract_features(log_, graph: PatrolGraph, distances: DistanceMatrix) -> AdversaryFeatures:
    if log_.n_vertices != graph.n_vertices:
        raise AdversaryError(f"log has {log_.n_vertices} vertices, graph has {graph.n_vertices}")
    src, dst, off = log_.agent_from, log_.agent_to, log_.agent_offset
    n = graph.n_vertices
    if src.size and (src.min() < 0 or dst.min() < 0 or src.max() >= n or dst.max() >= n):
        raise AdversaryError("log refers to vertices outside the graph")
    moving = src != dst
    if np.any(graph.weights[src[moving], dst[moving]] == 0):
        raise AdversaryError("log places agents on edges the graph does not have")
    if np.any(off[moving] > graph.weights[src[moving], dst[moving]] + 1e-9) or np.any(off < 0):
        raise AdversaryError("agent offsets exceed their edge lengths")
    dist = agent_distances(graph, distances, src, dst, off)
    times = np.asarray(log_.times, dtype=float)
    vel = np.zeros_like(dist)
    if len(times) > 1:
        vel[1:] = -np.diff(dist, axis=0) / np.diff(times)[:, None, None]
    return AdversaryFeatures(times, np.asarray(log_.idleness, dtype=float), dist, vel)


@dataclass(frozen=True)
class Binning:
    """Histogram grid. The last idleness and distance bins are open-ended."""

    idle_width: float = 10.0
    dist_width: float = 5.0
    idle_cap: float = 600.0
    dist_cap: float = 100.0
    velocity_eps: float = 1e-9

    @property
    def n_idle(self) -> int:
        return int(np.ceil(self.idle_cap / self.idle_width)) + 1

    @property
    def n_dist(self) -> int:
        return int(np.ceil(self.dist_cap / self.dist_width)) + 1

    def keys(self, idleness, dist, vel) -> np.ndarray:
        ib = np.minimum(np.floor(np.asarray(idleness) / self.idle_width + 1e-9), self.n_idle - 1).astype(int)
        db = np.minimum(np.floor(np.asarray(dist) / self.dist_width + 1e-9), self.n_dist - 1).astype(int)
        vb = np.where(vel > self.velocity_eps, APPROACHING, np.where(vel < -self.velocity_eps, RECEDING, STATIC))
        return (ib * self.n_dist + db) * 3 + vb

    def decode(self, key: int) -> tuple[int, int, int]:
        """``(idleness bin, distance bin, velocity class)`` of a key."""
        rest, vb = divmod(int(key), 3)
        ib, db = divmod(rest, self.n_dist)
        return ib, db, vb


@dataclass
class AttackPolicy:
    attack_duration: float
    dt: float
    split: int
    binning: Binning
    attack_states: dict[int, list[int]]
    success: dict[int, dict[int, float]] = field(repr=False)
    state_likelihood: dict[int, dict[int, float]] = field(repr=False)
    fallback: list[int] = field(default_factory=list)

    @property
    def duration_ticks(self) -> int:
        return int(round(self.attack_duration / self.dt))

    def to_dict(self) -> dict:
        def table(t):
            return {str(v): {str(k): p for k, p in row.items()} for v, row in t.items()}

        return {
            "attack_duration": self.attack_duration,
            "train_ticks": self.split,
            "binning": {"idle_width": self.binning.idle_width, "dist_width": self.binning.dist_width,
                        "idle_cap": self.binning.idle_cap, "dist_cap": self.binning.dist_cap},
            "attack_states": {str(v): [list(self.binning.decode(k)) for k in ks] for v, ks in self.attack_states.items()},
            "fallback_vertices": self.fallback,
            "success": table(self.success),
            "state_likelihood": table(self.state_likelihood),
        }


def quiet_after(idleness: np.ndarray, ticks: int, dt: float) -> np.ndarray:
    """``(T - ticks, n)`` flags: no visit in the ``ticks`` ticks after each tick."""
    if ticks >= len(idleness):
        return np.zeros((0, idleness.shape[1]), dtype=bool)
    gain = idleness[ticks:] - idleness[:-ticks]
    return np.abs(gain - ticks * dt) <= 1e-6 * max(1.0, ticks * dt)


def _duration_ticks(attack_duration: float, dt: float) -> int:
    if not attack_duration > 0:
        raise AdversaryError("attack_duration must be positive")
    ticks = attack_duration / dt
    if abs(ticks - round(ticks)) > 1e-9 * max(1.0, ticks):
        raise AdversaryError(f"attack_duration {attack_duration} is not a multiple of the log step {dt}")
    return int(round(ticks))


def fit(features: AdversaryFeatures, attack_duration: float, train_fraction: float = 0.5,
        binning: Binning | None = None) -> AttackPolicy:
    """Learn per-vertex success and state likelihoods on the first ``train_fraction`` of the log.

    Only ticks whose whole attack window lies inside the training prefix are
    used. Eligible bins are those expected to occur at least once per attack
    window; the attack states are the eligible bins with the highest success
    likelihood. A vertex with no eligible bin falls back to all its observed
    bins and is listed in ``fallback``.
    """
    if not 0 < train_fraction < 1:
        raise AdversaryError("train_fraction must lie in (0, 1)")
    binning = binning or Binning()
    dt = features.dt
    ticks = _duration_ticks(attack_duration, dt)
    split = int(np.floor(train_fraction * features.n_ticks))
    labelled = split - ticks
    if labelled < 1:
        raise AdversaryError(f"training prefix of {split} ticks is too short for a {attack_duration} s attack")
    dist, vel = features.nearest()
    keys = binning.keys(features.idleness[:labelled], dist[:labelled], vel[:labelled])
    quiet = quiet_after(features.idleness[:split], ticks, dt)[:labelled]

    attack_states, success, likelihood, fallback = {}, {}, {}, []
    for v in range(keys.shape[1]):
        uniq, inverse, counts = np.unique(keys[:, v], return_inverse=True, return_counts=True)
        wins = np.bincount(inverse, weights=quiet[:, v], minlength=len(uniq))
        rate = wins / counts
        freq = counts / labelled
        success[v] = {int(k): float(r) for k, r in zip(uniq, rate)}
        likelihood[v] = {int(k): float(f) for k, f in zip(uniq, freq)}
        eligible = freq * ticks >= 1.0
        if not eligible.any():
            eligible = np.ones(len(uniq), dtype=bool)
            fallback.append(v)
        best = rate[eligible].max()
        attack_states[v] = [int(k) for k in uniq[eligible & (rate >= best - 1e-12)]]
    return AttackPolicy(float(attack_duration), dt, split, binning, attack_states, success, likelihood, fallback)


@dataclass
class Evaluation:
    attack_duration: float
    p_s: dict[int, float | None]
    attempts: dict[int, int]
    successes: dict[int, int]
    aggregate: float | None
    no_attempt: list[int]

    def to_dict(self) -> dict:
        return {
            "attack_duration": self.attack_duration,
            "aggregate_p_s": self.aggregate,
            "p_s": {str(v): p for v, p in self.p_s.items()},
            "attempts": {str(v): a for v, a in self.attempts.items()},
            "successes": {str(v): s for v, s in self.successes.items()},
            "no_attempt": self.no_attempt,
        }


def evaluate(policy: AttackPolicy, features: AdversaryFeatures) -> Evaluation:
    """Attack the held-out suffix and score the patrol.

    The suffix is cut into consecutive windows of ``attack_duration``; in each
    window the adversary attacks a vertex at the first tick whose bin is an
    attack state, provided the attack can finish before the log ends. The
    attack succeeds when nobody visits in the following ``attack_duration``.
    ``p(s) = 1 - successes / attempts``.
    """
    ticks = policy.duration_ticks
    start = policy.split
    if start >= features.n_ticks:
        raise AdversaryError("log has no ticks after the training prefix")
    dist, vel = features.nearest()
    keys = policy.binning.keys(features.idleness[start:], dist[start:], vel[start:])
    quiet = quiet_after(features.idleness[start:], ticks, policy.dt)
    usable = len(quiet)   # attacks starting later cannot be scored
    n_windows = -(-len(keys) // ticks)

    p_s, attempts, successes, missing = {}, {}, {}, []
    for v in range(keys.shape[1]):
        hits = np.isin(keys[:, v], policy.attack_states.get(v, []))
        hits[usable:] = False
        padded = np.zeros(n_windows * ticks, dtype=bool)
        padded[:len(hits)] = hits
        per_window = padded.reshape(n_windows, ticks)
        fired = per_window.any(axis=1)
        first = per_window.argmax(axis=1)[fired] + np.flatnonzero(fired) * ticks
        n_try = int(len(first))
        n_win = int(quiet[first, v].sum()) if n_try else 0
        attempts[v], successes[v] = n_try, n_win
        if n_try:
            p_s[v] = 1.0 - n_win / n_try
        else:
            p_s[v] = None
            missing.append(v)
    if missing:
        log.warning("adversary never attacked vertices %s; excluded from the aggregate", missing)
    scored = [p for p in p_s.values() if p is not None]
    aggregate = float(np.mean(scored)) if scored else None
    return Evaluation(policy.attack_duration, p_s, attempts, successes, aggregate, missing)


def assess(log_, graph: PatrolGraph, distances: DistanceMatrix, attack_duration: float,
           train_fraction: float = 0.5, binning: Binning | None = None) -> tuple[AttackPolicy, Evaluation]:
    """Features, fit and evaluation in one call."""
    features = extract_features(log_, graph, distances)
    policy = fit(features, attack_duration, train_fraction, binning)
    return policy, evaluate(policy, features)
