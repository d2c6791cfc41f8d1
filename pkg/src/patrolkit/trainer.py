"""Single-agent advantage actor-critic training of the SUN, and MNS distillation.

The actor is a SUN whose utilities feed a softmax over all vertices; the
critic is a separate SUN whose utilities are max-pooled over vertices into
a state value. Choosing vertex ``v`` moves the agent one hop along a
shortest path towards ``v``; arriving at a vertex pays ``c`` times its
idleness just before the reset.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .graph import DistanceMatrix, PatrolGraph, generate_random_graph, shortest_paths
from .neural import (
    EdgeIndex,
    Mlp,
    MnsNetwork,
    SunNetwork,
    leaky_relu_grad,
    mlp_forward_cached,
    sun_backward,
    sun_forward_cached,
)
from .sim import SimConfig, advance_idleness, run

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    train_seeds: list[int] = field(default_factory=lambda: list(range(100, 110)))
    validation_seeds: list[int] = field(default_factory=lambda: list(range(200, 208)))
    n_vertices_range: tuple[int, int] = (15, 30)
    restarts: int = 5
    episodes_per_graph: int = 128
    episode_length: int = 200
    rollout_length: int = 200
    n_step: int = 200
    input_scale: float = 128.0
    n_envs: int = 32
    gamma: float = 0.99
    learning_rate: float = 0.1
    critic_learning_rate: float | None = 0.01
    entropy_coef: float = 1e-2
    reward_scale: float = 0.01
    grad_clip: float = 1.0
    action_space: str = "neighbors"
    init_scale: float = 0.5
    k: int = 1
    seed: int = 0
    validation_duration: float = 3600.0
    jobs: int = 1

    def validate(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.rollout_length < 1 or self.episode_length < 1:
            raise ValueError("episode and rollout lengths must be positive")
        if self.action_space not in ACTION_SPACES:
            raise ValueError(f"action_space must be one of {ACTION_SPACES}")
        if self.input_scale <= 0 or self.n_envs < 1 or self.n_step < 1:
            raise ValueError("input_scale, n_envs and n_step must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.n_vertices_range = tuple(cfg.n_vertices_range)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def training_graph(seed: int, n_vertices_range=(15, 80)) -> PatrolGraph:
    """Random graph with parameters drawn from the seed, within the published ranges.

    Vertices in ``n_vertices_range``, edges ``n .. min(1.6 n, 130)`` (at
    least 15), minimum edge 2-12 m, maximum edge 3-25 m.
    """
    rng = np.random.default_rng([seed, 7919])
    lo, hi = n_vertices_range
    n = int(rng.integers(lo, hi + 1))
    pairs = n * (n - 1) // 2
    e_lo = min(max(n, 15), pairs)
    e_hi = max(e_lo, min(int(1.6 * n), 130, pairs))
    n_edges = int(rng.integers(e_lo, e_hi + 1))
    min_edge = float(rng.uniform(2, 12))
    max_edge = float(rng.uniform(max(3.0, min_edge), 25))
    return generate_random_graph(n, n_edges, min_edge, max_edge, seed)


@dataclass
class PatrolEnv:
    """Single-agent training environment with continuous time."""

    graph: PatrolGraph
    distances: DistanceMatrix
    reward_scale: float = 0.01
    speed: float = 1.0
    current: int = 0
    idleness: np.ndarray = None
    time: float = 0.0

    def __post_init__(self):
        if self.idleness is None:
            self.idleness = np.zeros(self.graph.n_vertices)

    def reset(self, start: int) -> None:
        self.current = int(start)
        self.idleness = np.zeros(self.graph.n_vertices)
        self.time = 0.0

    def signal(self) -> np.ndarray:
        return np.stack([self.idleness, self.distances.d[self.current]], axis=-1)


def env_step(env: PatrolEnv, action: int) -> float:
    """Move one hop towards ``action``; returns the reward. Mutates ``env``."""
    action = int(action)
    if not 0 <= action < env.graph.n_vertices:
        raise ValueError(f"action {action} is not a vertex")
    if action != env.current:
        nxt = int(env.distances.next_hop[env.current, action])
        travel = env.graph.weights[env.current, nxt] / env.speed
        env.idleness = advance_idleness(env.idleness, travel)
        env.time += travel
        env.current = nxt
    reward = env.reward_scale * float(env.idleness[env.current])
    env.idleness[env.current] = 0.0
    return reward


@dataclass(frozen=True)
class ActorCritic:
    actor: SunNetwork
    critic: SunNetwork

    def __post_init__(self):
        shared = {id(p) for p in self.actor.params()} & {id(p) for p in self.critic.params()}
        if shared:
            raise ValueError("actor and critic must not share parameters")

    @classmethod
    def random(cls, rng: np.random.Generator, k: int = 1, scale: float = 0.5) -> ActorCritic:
        return cls(SunNetwork.random(rng, k, scale), SunNetwork.random(rng, k, scale))


@dataclass
class Trajectory:
    """``signals`` holds ``T + 1`` states; the last one is only used for bootstrapping."""

    signals: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self):
        return len(self.actions)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


ACTION_SPACES = ("all", "others", "neighbors")


def action_mask(signals, index: EdgeIndex, action_space: str = "all"):
    """Boolean mask of disallowed actions per state, or ``None`` when all vertices are allowed.

    ``others`` forbids the agent's own vertex (the only one at distance
    zero); ``neighbors`` allows only vertices adjacent to it.
    """
    if action_space == "all":
        return None
    here = np.asarray(signals)[..., 1] == 0.0
    if action_space == "others":
        return here
    if action_space != "neighbors":
        raise ValueError(f"unknown action space {action_space!r}; choose from {', '.join(ACTION_SPACES)}")
    adj = np.zeros((index.n, index.n), dtype=bool)
    adj[index.src, index.dst] = True
    return ~(here.astype(float) @ adj).astype(bool)


def log_softmax(logits, mask=None):
    """Row-wise log-probabilities; masked entries get ``-inf`` (probability 0)."""
    if mask is not None:
        logits = np.where(mask, -np.inf, logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy(actor: SunNetwork, index: EdgeIndex, signals, action_space: str = "all"):
    """Action probabilities for a batch of signals ``(B, n, 2)``; disallowed actions get 0."""
    logits = sun_forward_cached(actor, index, signals)[0]
    return np.exp(log_softmax(logits, action_mask(signals, index, action_space)))


def state_values(critic: SunNetwork, index: EdgeIndex, signals):
    return sun_forward_cached(critic, index, signals)[0].max(axis=1)


def td_constants(ac: ActorCritic, index: EdgeIndex, traj: Trajectory, gamma: float, n_step: int = 1):
    """Advantages and critic targets, treated as constants by the loss.

    The target for step ``t`` sums up to ``n_step`` discounted rewards and
    bootstraps from the critic after them, never looking past the end of
    the trajectory. ``n_step = 1`` is the one-step TD target.
    """
    values = state_values(ac.critic, index, traj.signals)
    t_len = len(traj)
    targets = np.empty(t_len)
    for t in range(t_len):
        end = min(t + n_step, t_len)
        disc = gamma ** np.arange(end - t)
        targets[t] = float(disc @ traj.rewards[t:end]) + gamma ** (end - t) * values[end]
    return targets - values[:-1], targets


def _batch(trajs):
    trajs = [trajs] if isinstance(trajs, Trajectory) else list(trajs)
    return (np.concatenate([t.signals[:-1] for t in trajs]), np.concatenate([t.actions for t in trajs]))


def actor_logit_grads(pi, log_pi, actions, advantages, entropy_coef: float):
    """Gradient of the actor loss with respect to the logits.

    ``log_pi`` must be 0 (not ``-inf``) where ``pi`` is 0.
    """
    rows = np.arange(len(actions))
    onehot = np.zeros_like(pi)
    onehot[rows, actions] = 1.0
    entropy = -(pi * log_pi).sum(axis=1)
    d_entropy = -pi * (log_pi + entropy[:, None])
    return -(np.asarray(advantages)[:, None] * (onehot - pi) + entropy_coef * d_entropy) / len(actions)


def a2c_loss(ac: ActorCritic, index: EdgeIndex, trajs, advantages, targets,
             entropy_coef: float, with_grad: bool = True, action_space: str = "all"):
    """Actor loss ``-mean(A log pi + beta H)`` plus critic loss ``mean((y - V)^2) / 2``.

    ``trajs`` is one trajectory or a list; ``advantages`` and ``targets``
    are aligned with their concatenated steps. Returns ``(actor_loss,
    critic_loss, actor_grads, critic_grads)``; the gradient lists are
    ``None`` when ``with_grad`` is false.
    """
    s, actions = _batch(trajs)
    t_len = len(actions)
    logits, a_cache = sun_forward_cached(ac.actor, index, s)
    log_pi = log_softmax(logits, action_mask(s, index, action_space))
    pi = np.exp(log_pi)
    log_pi = np.where(pi > 0, log_pi, 0.0)   # masked entries drop out of the entropy and its gradient
    rows = np.arange(t_len)
    entropy = -(pi * log_pi).sum(axis=1)
    actor_loss = -float(np.mean(advantages * log_pi[rows, actions] + entropy_coef * entropy))

    c_out, c_cache = sun_forward_cached(ac.critic, index, s)
    best = c_out.argmax(axis=1)
    values = c_out[rows, best]
    critic_loss = float(np.mean(0.5 * (targets - values) ** 2))
    if not with_grad:
        return actor_loss, critic_loss, None, None

    g_logits = actor_logit_grads(pi, log_pi, actions, advantages, entropy_coef)
    actor_grads, _ = sun_backward(ac.actor, index, a_cache, g_logits)

    g_c = np.zeros_like(c_out)
    g_c[rows, best] = (values - targets) / t_len   # max-pool routes the gradient to the argmax only
    critic_grads, _ = sun_backward(ac.critic, index, c_cache, g_c)
    return actor_loss, critic_loss, actor_grads, critic_grads


def _clipped_step(params, grads, lr, clip):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    scale = lr * (min(1.0, clip / norm) if norm > 0 else 1.0)
    return [p - scale * g for p, g in zip(params, grads)], norm


def a2c_update(ac: ActorCritic, index: EdgeIndex, trajs, *, gamma=0.99, learning_rate=1e-3,
               entropy_coef=1e-2, grad_clip=1.0, critic_learning_rate=None,
               action_space="all", n_step=1) -> tuple[ActorCritic, dict]:
    """One plain-SGD step for actor and critic on one trajectory or a batch of them.

    Returns the new pair and diagnostics. The critic uses
    ``critic_learning_rate`` when given, else ``learning_rate``.
    """
    trajs = [trajs] if isinstance(trajs, Trajectory) else list(trajs)
    parts = [td_constants(ac, index, t, gamma, n_step) for t in trajs]
    advantages = np.concatenate([a for a, _ in parts])
    targets = np.concatenate([y for _, y in parts])
    a_loss, c_loss, a_grads, c_grads = a2c_loss(ac, index, trajs, advantages, targets, entropy_coef,
                                                action_space=action_space)
    if not (math.isfinite(a_loss) and math.isfinite(c_loss)):
        raise TrainingError(f"non-finite loss (actor {a_loss}, critic {c_loss})")
    actor_params, a_norm = _clipped_step(ac.actor.params(), a_grads, learning_rate, grad_clip)
    critic_lr = learning_rate if critic_learning_rate is None else critic_learning_rate
    critic_params, c_norm = _clipped_step(ac.critic.params(), c_grads, critic_lr, grad_clip)
    new = ActorCritic(ac.actor.with_params(actor_params), ac.critic.with_params(critic_params))
    return new, {"actor_loss": a_loss, "critic_loss": c_loss, "actor_grad_norm": a_norm,
                 "critic_grad_norm": c_norm, "mean_advantage": float(np.mean(advantages))}


def _sample(probs, rng):
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(probs) - 1))


def unscale(net: SunNetwork, scale: float) -> SunNetwork:
    """Network on raw inputs equivalent to ``net`` trained on inputs divided by ``scale``.

    Leaky ReLU is positively homogeneous, so dividing the first layer and
    multiplying the output layer by ``scale`` gives ``scale * net(x / scale)``:
    every utility is multiplied by ``scale`` and every argmax is unchanged.
    """
    def fold(m: Mlp) -> Mlp:
        (w0, b0), (w1, b1) = m.layers
        return Mlp(((w0 / scale, b0), (w1 * scale, b1 * scale)))

    return SunNetwork(fold(net.f1), fold(net.f2), net.k)


def train_on_graph(ac: ActorCritic, graph: PatrolGraph, config: TrainConfig, rng: np.random.Generator):
    """Train on one graph with ``config.n_envs`` environments stepped in lockstep.

    Each round of ``rollout_length`` steps gives one update on the batch of
    all environments' trajectories. The networks see signals and edge
    weights divided by ``config.input_scale``.
    """
    distances = shortest_paths(graph)
    raw = EdgeIndex.of(graph)
    index = EdgeIndex(raw.n, raw.src, raw.dst, raw.weight / config.input_scale)
    envs = [PatrolEnv(graph, distances, config.reward_scale) for _ in range(config.n_envs)]
    stats = []
    rounds = -(-config.episodes_per_graph // config.n_envs)
    for _ in range(rounds):
        for env in envs:
            env.reset(rng.integers(graph.n_vertices))
        steps = 0
        while steps < config.episode_length:
            t_len = min(config.rollout_length, config.episode_length - steps)
            signals = [np.stack([env.signal() for env in envs]) / config.input_scale]
            actions, rewards = [], []
            for _ in range(t_len):
                probs = policy(ac.actor, index, signals[-1], config.action_space)
                acts = [_sample(p, rng) for p in probs]
                rewards.append([env_step(env, a) for env, a in zip(envs, acts)])
                actions.append(acts)
                signals.append(np.stack([env.signal() for env in envs]) / config.input_scale)
            sig, act, rew = np.array(signals), np.array(actions), np.array(rewards)
            trajs = [Trajectory(sig[:, e], act[:, e], rew[:, e]) for e in range(len(envs))]
            ac, info = a2c_update(ac, index, trajs, gamma=config.gamma, learning_rate=config.learning_rate,
                                  entropy_coef=config.entropy_coef, grad_clip=config.grad_clip,
                                  critic_learning_rate=config.critic_learning_rate,
                                  action_space=config.action_space, n_step=config.n_step)
            steps += t_len
            stats.append(info)
    return ac, stats


def validation_scores(sun: SunNetwork, graphs, duration: float, seed: int = 0) -> list[float]:
    scores = []
    for g in graphs:
        cfg = SimConfig(strategy="suns", n_agents=1, duration=duration, seed=seed)
        scores.append(float(run(cfg, graph=g, weights=sun).idleness.mean()))
    return scores


def initial_actor(config: TrainConfig, restart: int) -> SunNetwork:
    """Raw-input actor a restart starts from (before any update)."""
    rng = np.random.default_rng([config.seed, restart])
    return unscale(ActorCritic.random(rng, config.k, config.init_scale).actor, config.input_scale)


def _restart(args):
    config, restart = args
    rng = np.random.default_rng([config.seed, restart])
    ac = ActorCritic.random(rng, config.k, config.init_scale)
    initial = ac.actor
    try:
        for seed in config.train_seeds:
            ac, _ = train_on_graph(ac, training_graph(seed, config.n_vertices_range), config, rng)
    except TrainingError as exc:
        return {"restart": restart, "diverged": True, "diagnostic": str(exc), "actor": None}
    ac = ActorCritic(unscale(ac.actor, config.input_scale), unscale(ac.critic, config.input_scale))
    initial = unscale(initial, config.input_scale)
    valid = [training_graph(s, config.n_vertices_range) for s in config.validation_seeds]
    scores = validation_scores(ac.actor, valid, config.validation_duration)
    return {"restart": restart, "diverged": False, "validation": scores, "score": float(np.mean(scores)),
            "actor": ac.actor, "critic": ac.critic, "initial": initial}


def train(config: TrainConfig) -> tuple[SunNetwork, dict]:
    """Train ``config.restarts`` independent actor-critic pairs; keep the best actor on validation."""
    config.validate()
    jobs = [(config, r) for r in range(config.restarts)]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            results = list(pool.map(_restart, jobs))
    else:
        results = [_restart(j) for j in jobs]
    for r in results:
        if r["diverged"]:
            log.warning("restart %d diverged: %s", r["restart"], r["diagnostic"])
        else:
            log.info("restart %d: mean validation idleness %.2f", r["restart"], r["score"])
    finished = [r for r in results if not r["diverged"]]
    if not finished:
        raise TrainingError("all restarts diverged: " + "; ".join(f"#{r['restart']}: {r['diagnostic']}" for r in results))
    best = min(finished, key=lambda r: r["score"])
    report = {
        "config": config.to_dict(),
        "best_restart": best["restart"],
        "restarts": [{k: v for k, v in r.items() if k not in ("actor", "critic", "initial")} for r in results],
    }
    return best["actor"], report


def decision_samples(sun: SunNetwork, graphs, duration: float = 3600.0, n_agents: int = 1, seed: int = 0):
    """(idleness, distance) pairs and SUN utilities at every neighbour considered in SUNS runs."""
    inputs, targets = [], []
    for g in graphs:
        distances = shortest_paths(g)
        index = EdgeIndex.of(g)
        cfg = SimConfig(strategy="suns", n_agents=n_agents, duration=duration, seed=seed)
        sim_log = run(cfg, graph=g, weights=sun, distances=distances, record_decisions=True)
        for _, _, vertex, belief_idle, _ in sim_log.decisions:
            signal = np.stack([belief_idle, distances.d[vertex]], axis=-1)
            u = sun_forward_cached(sun, index, signal[None])[0][0]
            nbrs = list(g.neighbors[vertex])
            inputs.append(signal[nbrs])
            targets.append(u[nbrs])
    return np.concatenate(inputs), np.concatenate(targets)


def calibrate_offset(sun: SunNetwork, graphs, duration: float = 3600.0, n_agents: int = 2,
                     margin: float = 0.05) -> tuple[SunNetwork, float]:
    """Shift the f1 output bias so sampled neighbour utilities are positive.

    A constant added to every utility leaves the softmax policy unchanged,
    so training never moves this bias; the shift only matters for
    intention masking, which zeroes utilities.
    """
    _, u = decision_samples(sun, graphs, duration, n_agents)
    shift = max(0.0, margin * float(np.ptp(u)) - float(u.min()))
    f1 = sun.f1.params()
    f1[3] = f1[3] + shift
    return SunNetwork(sun.f1.with_params(f1), sun.f2, sun.k), shift


@dataclass
class DistillResult:
    mns: MnsNetwork
    mse: float
    r2: float
    n_samples: int


def _mns_mlp(theta) -> Mlp:
    return Mlp(((theta[:4].reshape(2, 2), theta[4:6]), (theta[6:8].reshape(1, 2), theta[8:9])))


def _mns_residuals(theta, x, y):
    return mlp_forward_cached(_mns_mlp(theta), x)[0] - y


def _mns_jacobian(theta, x, y):
    mlp = _mns_mlp(theta)
    acts, pres = mlp_forward_cached(mlp, x)[1]
    d_hidden = leaky_relu_grad(pres[0]) * mlp.layers[1][0][0]   # d out / d hidden pre-activation
    jac = np.empty((len(x), 9))
    jac[:, 0:2] = d_hidden[:, 0:1] * x
    jac[:, 2:4] = d_hidden[:, 1:2] * x
    jac[:, 4:6] = d_hidden
    jac[:, 6:8] = acts[1]
    jac[:, 8] = 1.0
    return jac


def distill_mns(sun: SunNetwork | None = None, graphs=None, *, samples=None, restarts: int = 16,
                seed: int = 0) -> DistillResult:
    """Least-squares fit of the 2-2-1 minimal network to SUN utilities.

    Pass ``samples=(inputs, targets)`` directly, or a SUN plus ``graphs`` to
    harvest them from SUNS runs.
    """
    if samples is None:
        if sun is None or graphs is None:
            raise ValueError("need either samples or a SUN and graphs to harvest them from")
        samples = decision_samples(sun, graphs)
    x, y = (np.asarray(a, dtype=float) for a in samples)
    if len(y) < 9 or float(np.ptp(y)) == 0.0:
        raise TrainingError("degenerate distillation sample: targets are constant or too few")
    rng = np.random.default_rng(seed)
    scale = np.abs(x).max(axis=0) + 1e-12
    best = None
    for _ in range(restarts):
        # each hidden kink starts through a random sample point, in a random direction
        theta0 = rng.uniform(-0.5, 0.5, size=9)
        w = rng.normal(size=(2, 2)) / scale
        anchors = x[rng.integers(len(x), size=2)]
        theta0[:4] = w.ravel()
        theta0[4:6] = -(w * anchors).sum(axis=1)
        fit = least_squares(_mns_residuals, theta0, jac=_mns_jacobian, args=(x, y), method="lm", max_nfev=4000,
                            ftol=1e-12, xtol=1e-12, gtol=1e-12)
        if best is None or fit.cost < best.cost:
            best = fit
    mns = MnsNetwork(_mns_mlp(best.x))
    mse = float(np.mean(_mns_residuals(best.x, x, y) ** 2))
    return DistillResult(mns, mse, float(1.0 - mse / np.var(y)), len(y))


def save_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1)
