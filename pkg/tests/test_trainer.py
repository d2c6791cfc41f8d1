import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patrolkit.graph import shortest_paths
from patrolkit.neural import EdgeIndex, Mlp, SunNetwork, mlp_forward, sun_forward, sun_forward_cached
from patrolkit.trainer import (
    ACTION_SPACES,
    ActorCritic,
    PatrolEnv,
    TrainConfig,
    TrainingError,
    Trajectory,
    a2c_loss,
    a2c_update,
    action_mask,
    actor_logit_grads,
    calibrate_offset,
    distill_mns,
    env_step,
    initial_actor,
    log_softmax,
    policy,
    td_constants,
    train,
    training_graph,
    unscale,
)

from conftest import central_diff, kink_margin, make_graph, max_rel_error

A, B, C = 0, 1, 2


@pytest.fixture
def path3():
    return make_graph(3, [(A, B, 3.0), (B, C, 4.0)])


def env_for(graph, start=A, c=0.01):
    env = PatrolEnv(graph, shortest_paths(graph), reward_scale=c)
    env.reset(start)
    return env


def test_env_step_examples(path3):
    env = env_for(path3)
    # fresh environment: the idleness at arrival is the traversal time
    assert env_step(env, C) == pytest.approx(0.01 * 3.0)
    assert env.current == B and env.time == 3.0
    np.testing.assert_array_equal(env.idleness, [3.0, 0.0, 3.0])
    assert env_step(env, C) == pytest.approx(0.01 * 7.0)
    # staying put pays the current vertex's idleness (here just reset) and does not move
    assert env_step(env, C) == 0.0
    assert env.current == C and env.time == 7.0
    with pytest.raises(ValueError):
        env_step(env, 3)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=40))
def test_env_idleness_is_time_since_visit(actions):
    g = make_graph(5, [(0, 1, 2.0), (1, 2, 3.5), (2, 3, 1.0), (3, 4, 2.5), (0, 4, 6.0)])
    env = env_for(g)
    last = np.zeros(5)
    total = 0.0
    for a in actions:
        idle_before = env.time - last
        r = env_step(env, a)
        assert r == pytest.approx(0.01 * (env.time - last[env.current]))
        last[env.current] = env.time
        total += r
        np.testing.assert_allclose(env.idleness, env.time - last, atol=1e-9)
        assert np.all(env.idleness <= idle_before + env.time)


def random_trajectory(graph, ac, rng, steps=6, action_space="all"):
    env = env_for(graph, start=int(rng.integers(graph.n_vertices)))
    index = EdgeIndex.of(graph)
    signals, actions, rewards = [env.signal()], [], []
    for _ in range(steps):
        p = policy(ac.actor, index, signals[-1][None], action_space)[0]
        a = int(rng.choice(graph.n_vertices, p=p))
        rewards.append(env_step(env, a))
        actions.append(a)
        signals.append(env.signal())
    return Trajectory(np.array(signals), np.array(actions), np.array(rewards))


def zero_sun():
    return SunNetwork(Mlp.zeros((2, 4, 1)), Mlp.zeros((3, 6, 1)))


def test_advantage_is_reward_when_critic_is_zero(path3):
    rng = np.random.default_rng(0)
    ac = ActorCritic(SunNetwork.random(rng), zero_sun())
    traj = random_trajectory(path3, ac, rng)
    adv, targets = td_constants(ac, EdgeIndex.of(path3), traj, gamma=1.0)
    np.testing.assert_allclose(adv, traj.rewards)
    np.testing.assert_allclose(targets, traj.rewards)


@pytest.mark.parametrize("n_step", [1, 3, 50])
def test_n_step_targets_match_direct_sum(path3, n_step):
    rng = np.random.default_rng(1)
    ac = ActorCritic.random(rng)
    index = EdgeIndex.of(path3)
    traj = random_trajectory(path3, ac, rng, steps=8)
    gamma = 0.9
    v = [float(sun_forward(ac.critic, path3, s).max()) for s in traj.signals]
    adv, targets = td_constants(ac, index, traj, gamma, n_step)
    for t in range(8):
        y, disc, j = 0.0, 1.0, t
        while j < min(t + n_step, 8):
            y += disc * traj.rewards[j]
            disc *= gamma
            j += 1
        y += disc * v[j]
        assert targets[t] == pytest.approx(y, rel=1e-12)
        assert adv[t] == pytest.approx(y - v[t], rel=1e-12)


def test_uniform_policy_positive_advantage_raises_chosen_logit():
    n = 4
    pi = np.full((1, n), 1 / n)
    g = actor_logit_grads(pi, np.log(pi), np.array([2]), np.array([1.5]), entropy_coef=0.0)
    ascent = -g[0]
    assert ascent[2] > 0 and np.all(ascent[[0, 1, 3]] < 0)
    np.testing.assert_allclose(ascent[2], 1.5 * (1 - 1 / n))


def critic_gap(ac, index, signals):
    out = np.sort(sun_forward_cached(ac.critic, index, signals)[0], axis=1)
    return float((out[:, -1] - out[:, -2]).min())


@pytest.mark.parametrize("action_space", ACTION_SPACES)
def test_a2c_loss_gradient_matches_finite_differences(path3, action_space):
    index = EdgeIndex.of(path3)
    checked, seed = 0, 0
    while checked < 20:
        seed += 1
        rng = np.random.default_rng(seed)
        ac = ActorCritic.random(rng)
        traj = random_trajectory(path3, ac, rng, action_space=action_space)
        s = traj.signals[:-1]
        caches = sun_forward_cached(ac.actor, index, s)[1] + sun_forward_cached(ac.critic, index, s)[1]
        if kink_margin(caches) < 1e-3 or critic_gap(ac, index, s) < 1e-3:
            continue   # finite differences across a rectifier kink or a max-pool switch are not an oracle
        checked += 1
        adv, targets = td_constants(ac, index, traj, 0.99, n_step=2)
        _, _, ga, gc = a2c_loss(ac, index, traj, adv, targets, 0.05, action_space=action_space)

        def actor_loss(params):
            return a2c_loss(ActorCritic(ac.actor.with_params(params), ac.critic), index, traj, adv, targets, 0.05,
                            with_grad=False, action_space=action_space)[0]

        def critic_loss(params):
            return a2c_loss(ActorCritic(ac.actor, ac.critic.with_params(params)), index, traj, adv, targets, 0.05,
                            with_grad=False, action_space=action_space)[1]

        assert max_rel_error(ga, central_diff(actor_loss, ac.actor.params())) < 1e-4
        assert max_rel_error(gc, central_diff(critic_loss, ac.critic.params())) < 1e-4


def test_critic_gradient_only_through_maxpool_argmax(path3):
    rng = np.random.default_rng(5)
    ac = ActorCritic.random(rng)
    index = EdgeIndex.of(path3)
    traj = random_trajectory(path3, ac, rng, steps=1)
    adv, targets = td_constants(ac, index, traj, 0.99)
    s = traj.signals[:1]
    out = sun_forward_cached(ac.critic, index, s)[0][0]
    best = int(out.argmax())
    # f2 output weights reach vertex i only through its own utility: with one step, the
    # f1 output-bias gradient equals d loss / d V, the argmax vertex's share
    _, _, _, gc = a2c_loss(ac, index, traj, adv, targets, 0.0)
    value = out[best]
    np.testing.assert_allclose(gc[3], value - targets[0], rtol=1e-12)


@given(st.integers(0, 10_000), st.sampled_from(ACTION_SPACES))
def test_policy_is_a_distribution(seed, action_space):
    rng = np.random.default_rng(seed)
    g = training_graph(seed, (5, 12))
    index = EdgeIndex.of(g)
    d = shortest_paths(g)
    here = rng.integers(g.n_vertices, size=4)
    signals = np.stack([np.stack([rng.uniform(0, 400, g.n_vertices), d.d[h]], axis=-1) for h in here])
    actor = SunNetwork.random(rng, scale=2.0)
    p = policy(actor, index, signals, action_space)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    mask = action_mask(signals, index, action_space)
    if mask is not None:
        assert np.all(p[mask] == 0)
    lp = log_softmax(sun_forward_cached(actor, index, signals)[0], mask)
    entropy = -(p * np.where(p > 0, lp, 0.0)).sum(axis=1)
    assert np.all(entropy >= 0)


def test_neighbors_mask(path3):
    index = EdgeIndex.of(path3)
    d = shortest_paths(path3)
    signals = np.stack([np.stack([np.zeros(3), d.d[v]], axis=-1) for v in (A, B)])
    mask = action_mask(signals, index, "neighbors")
    np.testing.assert_array_equal(~mask, [[False, True, False], [True, False, True]])
    np.testing.assert_array_equal(~action_mask(signals, index, "others"), [[False, True, True], [True, False, True]])


def test_non_finite_loss_aborts(path3):
    rng = np.random.default_rng(0)
    ac = ActorCritic.random(rng)
    traj = random_trajectory(path3, ac, rng)
    traj.rewards[0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        a2c_update(ac, EdgeIndex.of(path3), traj)


@given(st.integers(0, 1000), st.sampled_from([0.5, 4.0, 128.0, 100.0]))
def test_unscale_multiplies_utilities(seed, scale):
    rng = np.random.default_rng(seed)
    net = SunNetwork.random(rng, k=int(rng.integers(1, 3)))
    g = training_graph(seed, (4, 8))
    s = np.stack([rng.uniform(0, 300, g.n_vertices), rng.uniform(0, 50, g.n_vertices)], axis=-1)
    scaled_graph = g.__class__(g.positions, tuple((u, v, w / scale) for u, v, w in g.edges))
    np.testing.assert_allclose(sun_forward(unscale(net, scale), g, s), scale * sun_forward(net, scaled_graph, s / scale),
                               rtol=1e-10, atol=1e-9)


def tiny_config(**kw):
    base = dict(train_seeds=[100], validation_seeds=[200, 201], restarts=1, episodes_per_graph=4, n_envs=2,
                episode_length=40, rollout_length=20, n_step=20, validation_duration=120.0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rate_returns_initialization():
    cfg = tiny_config(learning_rate=0.0)
    sun, report = train(cfg)
    assert sun == initial_actor(cfg, 0)
    assert report["best_restart"] == 0


def test_report_has_one_score_per_restart():
    _, report = train(tiny_config(restarts=3))
    assert len(report["restarts"]) == 3
    assert all(len(r["validation"]) == 2 for r in report["restarts"])
    assert report["best_restart"] == min(report["restarts"], key=lambda r: r["score"])["restart"]


def test_training_is_deterministic():
    a, ra = train(tiny_config(restarts=2))
    b, rb = train(tiny_config(restarts=2))
    assert a == b and ra == rb


def test_all_restarts_diverged():
    with pytest.raises(TrainingError, match="all restarts diverged"):
        train(tiny_config(restarts=2, reward_scale=float("nan")))


def test_config_validation():
    for kw in (dict(gamma=0.0), dict(gamma=1.5), dict(restarts=0), dict(action_space="some"), dict(n_envs=0)):
        with pytest.raises(ValueError):
            tiny_config(**kw).validate()
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochs": 3})


@pytest.mark.parametrize("seed", [100, 105, 200, 207])
def test_training_graph_ranges(seed):
    g = training_graph(seed, (15, 30))
    assert 15 <= g.n_vertices <= 30
    assert max(15, g.n_vertices) <= len(g.edges) <= max(15, min(int(1.6 * g.n_vertices), 130))
    shortest_paths(g)   # connected


def test_distill_recovers_representable_target():
    rng = np.random.default_rng(0)
    # f1 uses two hidden units with well-separated kinks; f2 is identically zero
    w0 = np.array([[0.02, -0.1], [0.01, 0.08], [0.0, 0.0], [0.0, 0.0]])
    f1 = Mlp(((w0, np.array([0.3, -3.0, 0.0, 0.0])), (np.array([[1.5, -0.7, 0.0, 0.0]]), np.array([0.4]))))
    x = np.stack([rng.uniform(0, 500, 400), rng.uniform(0, 60, 400)], axis=-1)
    y = np.array([mlp_forward(f1, xi) for xi in x])
    result = distill_mns(samples=(x, y))
    assert result.mse < 1e-10 * np.var(y)
    pred = np.array([mlp_forward(result.mns.f1, xi) for xi in x])
    assert result.mse == pytest.approx(np.mean((pred - y) ** 2), rel=1e-9)
    assert result.n_samples == 400


def test_distill_rejects_constant_targets():
    x = np.random.default_rng(0).uniform(size=(50, 2))
    with pytest.raises(TrainingError, match="degenerate"):
        distill_mns(samples=(x, np.full(50, 2.0)))


def test_calibration_shift_keeps_single_agent_policy():
    from patrolkit.sim import SimConfig, run

    rng = np.random.default_rng(4)
    sun = SunNetwork.random(rng)
    graphs = [training_graph(s, (8, 12)) for s in (1, 2)]
    shifted, shift = calibrate_offset(sun, graphs, duration=300.0)
    assert shift >= 0
    if sun.k == 1:
        g = graphs[0]
        s = np.stack([rng.uniform(0, 100, g.n_vertices), rng.uniform(0, 30, g.n_vertices)], axis=-1)
        np.testing.assert_allclose(sun_forward(shifted, g, s), sun_forward(sun, g, s) + shift)
    cfg = SimConfig(strategy="suns", duration=300.0)
    for g in graphs:
        np.testing.assert_array_equal(run(cfg, graph=g, weights=sun).visits, run(cfg, graph=g, weights=shifted).visits)
