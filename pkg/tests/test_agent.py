import numpy as np
import pytest
from scipy import stats

from dqnf import nn
from dqnf.agent import (AgentConfig, Batch, DQNAgent, ExplorationSchedule, ReplayBuffer, double_dqn_targets,
                        select_action, td_loss, td_loss_from_q)
from dqnf.envs import make_gridrooms
from dqnf.frontier import FrontierConfig


def fixed_qnet(q_values):
    """Linear net whose output for the one-hot input e_i is row i of ``q_values``."""
    q = np.asarray(q_values, dtype=np.float64)
    specs = [nn.dense(q.shape[0], q.shape[1])]
    return nn.Network(specs, nn.NetworkParams([q.T.copy(), np.zeros(q.shape[1])]))


def onehot(i, n=2):
    return np.eye(n)[i]


def test_epsilon_one_is_uniform():
    net = fixed_qnet([[0.0, 5.0, 1.0, 2.0, 0.5]])
    rng = np.random.default_rng(0)
    draws = [select_action(net, onehot(0, 1), 1.0, rng) for _ in range(10_000)]
    counts = np.bincount(draws, minlength=5)
    assert stats.chisquare(counts).pvalue > 0.01


def test_greedy_argmax_and_ties():
    rng = np.random.default_rng(0)
    assert select_action(fixed_qnet([[0.1, 0.9, 0.3]]), onehot(0, 1), 0.0, rng) == 1
    assert select_action(fixed_qnet([[0.5, 0.5, 0.1]]), onehot(0, 1), 0.0, rng) == 0


def test_exploration_schedule():
    sched = ExplorationSchedule(1.0, 0.05, 1000)
    assert sched.value(0) == 1.0
    assert sched.value(500) == pytest.approx(0.525)
    assert sched.value(1000) == 0.05 and sched.value(10**6) == 0.05


def _batch(s, a, r, s_next, done, f=None):
    n = len(a)
    return Batch(np.asarray(s, float), np.asarray(a), np.asarray(r, float), np.asarray(s_next, float),
                 np.asarray(done, bool), np.zeros(n, np.int8) if f is None else np.asarray(f, np.int8))


def test_terminal_target_is_reward():
    net = fixed_qnet([[0.3, 0.7], [0.2, 0.1]])
    b = _batch([onehot(0)], [0], [1.0], [onehot(1)], [True])
    assert double_dqn_targets(b, net, net, 0.99)[0] == 1.0


def test_zero_gamma_gives_rewards():
    net = fixed_qnet([[0.3, 0.7], [0.2, 0.1]])
    b = _batch([onehot(0), onehot(1)], [0, 1], [0.5, -0.2], [onehot(1), onehot(0)], [False, False])
    np.testing.assert_allclose(double_dqn_targets(b, net, net, 0.0), [0.5, -0.2])


def test_double_dqn_selects_online_evaluates_target():
    online = fixed_qnet([[0.9, 0.1], [0.0, 0.0]])
    target = fixed_qnet([[0.2, 0.8], [0.0, 0.0]])
    b = _batch([onehot(1)], [0], [0.0], [onehot(0)], [False])
    assert double_dqn_targets(b, online, target, 0.5)[0] == pytest.approx(0.5 * 0.2)


def test_rejected_transition_self_loop_target():
    online = fixed_qnet([[0.4, 0.6, 0.1]])
    target = fixed_qnet([[0.3, 0.5, 0.2]])
    s = onehot(0, 1)
    b = _batch([s], [2], [0.0], [s], [False], [1])
    assert double_dqn_targets(b, online, target, 0.99)[0] == pytest.approx(0.99 * 0.5)


def test_td_loss_cases():
    q = np.array([[0.2, 0.0]])
    loss, dq = td_loss_from_q(q, np.array([0]), np.array([0.7]))
    assert loss == pytest.approx(0.25)
    np.testing.assert_allclose(dq, [[-1.0, 0.0]])
    q = np.array([[0.2, 0.4], [0.1, -0.3]])
    a, y = np.array([1, 0]), np.array([0.4, 0.1])
    assert td_loss_from_q(q, a, y)[0] == 0.0
    y = np.array([0.5, 0.3])
    base = td_loss_from_q(q, a, y)[0]
    doubled = td_loss_from_q(q, a, q[[0, 1], a] + 2 * (y - q[[0, 1], a]))[0]
    assert doubled == pytest.approx(4 * base)


def test_td_loss_gradient_matches_finite_differences():
    specs = nn.mlp_chain(4, 3, hidden=(5,))
    net = nn.Network.build(specs, 0, np.float64)
    rng = np.random.default_rng(0)
    b = _batch(rng.normal(size=(6, 4)), rng.integers(3, size=6), rng.normal(size=6),
               rng.normal(size=(6, 4)), np.zeros(6, bool))
    y = rng.normal(size=6)
    _, grads = td_loss(net, b, y)
    t, idx, h = 0, (1, 2), 1e-6
    for sign in (+1, -1):
        net.params.tensors[t][idx] += sign * h
        if sign > 0:
            plus = td_loss(net, b, y)[0]
        else:
            minus = td_loss(net, b, y)[0]
        net.params.tensors[t][idx] -= sign * h
    assert grads[t][idx] == pytest.approx((plus - minus) / (2 * h), rel=1e-6)


def test_replay_ring_and_validation():
    buf = ReplayBuffer(3, (2,))
    for i in range(5):
        buf.push(np.full(2, i), i, 0.0, np.full(2, i + 1), False, 0)
    assert len(buf) == 3 and set(buf.a.tolist()) == {2, 3, 4}
    with pytest.raises(ValueError):
        buf.push(np.zeros(2), 0, 0.0, np.ones(2), False, 1)
    with pytest.raises(ValueError):
        buf.push(np.zeros(2), 0, 1.0, np.zeros(2), False, 1)


def test_replay_sampling_is_uniform():
    buf = ReplayBuffer(100, (1,))
    for i in range(250):
        buf.push(np.zeros(1), i, 0.0, np.ones(1), False, 0)
    idx = buf.indices(100_000, np.random.default_rng(0))
    assert stats.chisquare(np.bincount(idx, minlength=100)).pvalue > 0.01


def _grid_agent(seed=0, frontier=None, **overrides):
    env = make_gridrooms("rooms5", k=2, max_steps=30)
    specs = nn.conv_chain(env.spec.observation_shape[0], env.n_actions)
    cfg = AgentConfig(**{"learn_start": 100, "target_update": 25, "lr_start": 1e-3, "lr_end": 1e-4,
                         **overrides})
    return env, DQNAgent(specs, env.spec.observation_shape, cfg, seed, 1000, frontier, np.float64)


def _play(env, agent, n, seed=0):
    reports = []
    obs = env.reset(seed)
    ep = 0
    for _ in range(n):
        a = agent.act(obs)
        step = env.step(a)
        reports.append(agent.observe(obs, a, step))
        obs = step.observation
        if step.done:
            ep += 1
            obs = env.reset(seed + ep)
    return reports


def test_warm_up_leaves_parameters_unchanged():
    env, agent = _grid_agent()
    before = agent.online.params.copy()
    reports = _play(env, agent, 99)
    assert all(r is None for r in reports)
    assert agent.online.params.equals(before)
    _play(env, agent, 2)
    assert not agent.online.params.equals(before)


def test_target_sync_copies_online():
    env, agent = _grid_agent()
    _play(env, agent, 99)
    assert agent.target.params.equals(agent.online.params)      # untouched since construction
    for _ in range(25):
        r = _play(env, agent, 1)[0]
    assert r.synced and agent.grad_steps == 25
    assert agent.target.params.equals(agent.online.params)
    _play(env, agent, 1)
    assert not agent.target.params.equals(agent.online.params)


def test_same_seed_same_losses():
    runs = []
    for _ in range(2):
        env, agent = _grid_agent(seed=3, frontier=FrontierConfig(classifier_lr=1e-3))
        runs.append([(r.dqn_loss, r.frontier_loss, r.classifier_loss)
                     for r in _play(env, agent, 1000, seed=9) if r is not None])
    assert runs[0] == runs[1] and len(runs[0]) == 901


def test_agent_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        AgentConfig.from_dict({"learning_rate": 1e-3})
    assert AgentConfig.from_dict(AgentConfig().to_dict()) == AgentConfig()
