import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import jointrep.diffgraph as dg
from jointrep.agents import (
    ImaginationAgent,
    ImaginationConfig,
    SacAgent,
    SacConfig,
    alpha_update,
    lambda_returns,
    squashed_log_prob,
    tanh_log_det,
)
from jointrep.errors import UsageError
from jointrep.rssm import NoiseSource

from conftest import small_model

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


# -- lambda returns ------------------------------------------------------------

def test_lambda_return_examples():
    assert abs(lambda_returns([1.0], [0.0, 0.5], 0.99, 0.0)[0] - 1.495) < 1e-12
    assert abs(lambda_returns([1.0, 1.0], [0.0, 0.5, 0.5], 0.99, 0.95)[0] - 2.430798) < 1e-6
    assert abs(lambda_returns([1.0, 1.0], [0.0, 0.5, 0.5], 0.99, 1.0)[0] - 2.48005) < 1e-12


def test_lambda_return_length_mismatch():
    with pytest.raises(UsageError):
        lambda_returns([1.0, 1.0], [0.0, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.floats(0, 1), st.floats(0, 1))
def test_lambda_returns_linear_in_rewards(rewards, gamma, lam):
    zeros = [0.0] * (len(rewards) + 1)
    a = lambda_returns(rewards, zeros, gamma, lam)
    b = lambda_returns([2 * r for r in rewards], zeros, gamma, lam)
    np.testing.assert_array_equal(b, 2 * a)


def test_lambda_returns_node_path_matches_numpy():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
    ref = lambda_returns(r, v)
    out = lambda_returns([dg.constant(x) for x in r], [dg.leaf(x) for x in v])
    np.testing.assert_allclose(np.stack([o.value for o in out]), ref, atol=1e-12)


# -- squashed Gaussian -----------------------------------------------------------

def test_squashed_log_prob_matches_change_of_variables():
    mean, std = 0.3, 0.7
    u = np.linspace(-4, 4, 101)
    lp = squashed_log_prob(np.full((101, 1), mean), np.full((101, 1), std), u[:, None]).value
    a = np.tanh(u)
    pu = np.exp(-0.5 * ((u - mean) / std) ** 2) / (std * math.sqrt(2 * math.pi))
    ref = np.log(pu / (1 - a ** 2))
    np.testing.assert_allclose(lp, ref, atol=1e-6)


def test_squashed_density_integrates_to_one():
    a = np.linspace(-1 + 1e-9, 1 - 1e-9, 200_001)
    u = np.arctanh(a)
    lp = squashed_log_prob(np.full((len(a), 1), -0.4), np.full((len(a), 1), 0.5), u[:, None]).value
    assert abs(np.trapezoid(np.exp(lp), a) - 1.0) < 1e-4


def test_tanh_log_det_is_stable():
    v = tanh_log_det(np.array([[50.0, -50.0]])).value[0]
    assert np.isfinite(v)
    assert abs(v - 2 * 2 * (math.log(2) - 50.0)) < 1e-9
    x = np.array([[0.3, -1.2]])
    np.testing.assert_allclose(tanh_log_det(x).value, np.log(1 - np.tanh(x) ** 2).sum(-1), atol=1e-12)


# -- temperature -------------------------------------------------------------------

def test_alpha_defaults_and_updates():
    agent = SacAgent(4, 2, SacConfig(hidden=(8,)))
    assert abs(agent.alpha - 0.1) < 1e-15
    assert agent.target_entropy == -2.0
    la = math.log(0.1)
    assert alpha_update(2.0, -2.0, la) == la  # entropy -logp = -2 equals the target
    assert alpha_update(-1.0, -2.0, la) < la  # entropy 1 above target
    assert alpha_update(3.0, -2.0, la) > la  # entropy -3 below target


# -- SAC -------------------------------------------------------------------------------

def test_critic_target_by_hand():
    agent = SacAgent(3, 2, SacConfig(hidden=(4,)))
    agent.actor_store.fill_(0.0)
    agent.target_store.fill_(0.0)
    agent.target_store["critic.q1.q.b"].value = np.array([1.5])
    agent.target_store["critic.q2.q.b"].value = np.array([0.7])
    y = agent.critic_target(np.array([0.25]), np.ones((1, 3)), np.zeros(1), np.zeros((1, 2)))
    # zero actor: mean 0, log std -5 + 3.5 = -1.5, u = 0 so no tanh correction
    logp = 2 * (1.5 - HALF_LOG_2PI)
    assert abs(y[0] - (0.25 + 0.99 * (0.7 - 0.1 * logp))) < 1e-12
    y_done = agent.critic_target(np.array([0.25]), np.ones((1, 3)), np.ones(1), np.zeros((1, 2)))
    assert y_done[0] == 0.25


def test_target_critic_is_ema_of_online():
    cfg = SacConfig(hidden=(8,), seed=1)
    agent = SacAgent(3, 2, cfg)
    rng = np.random.default_rng(0)
    ema = {k: v.copy() for k, v in agent.critic_store.arrays().items()}
    for _ in range(5):
        batch = {"features": rng.normal(size=(6, 3)), "action": rng.uniform(-1, 1, (6, 2)),
                 "reward": rng.normal(size=6), "next_features": rng.normal(size=(6, 3))}
        agent.update(batch, rng)
        for k, v in agent.critic_store.arrays().items():
            ema[k] = 0.995 * ema[k] + 0.005 * v
    for k, v in agent.target_store.arrays().items():
        np.testing.assert_allclose(v, ema[k], atol=1e-12, rtol=0)


def test_sac_learns_a_bandit():
    agent = SacAgent(2, 1, SacConfig(hidden=(32, 32), seed=0))
    rng = np.random.default_rng(1)
    f = np.ones((64, 2))
    for _ in range(1000):
        a = agent.act(f, rng, explore=True)
        batch = {"features": f, "action": a, "reward": -((a[:, 0] - 0.5) ** 2), "next_features": f,
                 "done": np.ones(64)}
        agent.update(batch, rng)
    assert abs(agent.act(f[:1], rng, explore=False)[0, 0] - 0.5) < 0.1


def test_sac_state_roundtrip():
    a = SacAgent(3, 2, SacConfig(hidden=(4,), seed=2))
    b = SacAgent(3, 2, SacConfig(hidden=(4,), seed=3))
    a.log_alpha = -1.23
    b.load_state_arrays(a.state_arrays())
    for k, v in a.state_arrays().items():
        np.testing.assert_array_equal(v, b.state_arrays()[k])


# -- imagination agent ------------------------------------------------------------

def _imag_agent(model, **kw):
    return ImaginationAgent(model.feature_dim, model.config.action_dim, ImaginationConfig(hidden=(8, 8), **kw))


def test_imagination_defaults():
    cfg = ImaginationConfig()
    assert (cfg.horizon, cfg.slow_decay, cfg.slow_interval, cfg.expl_noise) == (15, 0.98, 1, 0.3)


def test_imagination_zero_model():
    m = small_model()
    m.store.fill_(0.0)
    agent = _imag_agent(m, horizon=5)
    for store in (agent.value_store, agent.slow_store):
        for k, n in store.items():
            if k.endswith(".b"):
                n.value = np.full_like(n.value, 0.3)
    start = m.initial_state(4)
    v0 = agent._v(agent.value, np.zeros((4, m.feature_dim))).value
    out = agent.update(m, start, NoiseSource(0))
    assert out["imag_reward"] == 0.0
    # every imagined feature is zero, so all value targets equal v(0) propagated through zero rewards
    lam_ret = lambda_returns([0.0] * 5, [v0[0]] * 6)
    assert abs(out["imag_return"] - lam_ret.mean()) < 1e-12
    assert abs(out["value_loss"] - np.mean((v0[0] - lam_ret) ** 2)) < 1e-12


def test_imagination_update_leaves_model_untouched():
    m = small_model(seed=4)
    agent = _imag_agent(m, horizon=4)
    before = m.store.digest()
    actor_before = agent.actor_store.digest()
    for _ in range(3):
        agent.update(m, m.initial_state(3), NoiseSource(1))
    assert m.store.digest() == before
    assert agent.actor_store.digest() != actor_before


def test_imagination_actor_gradient_through_dynamics():
    m = small_model(seed=5)
    agent = _imag_agent(m, horizon=3)
    agent.actor_store.zero_grad()
    start = m.initial_state(2)
    with m.store.frozen(), agent.value_store.frozen():
        traj = m.imagine(start, agent.policy, 3, NoiseSource(0))
        dg.stack(traj.rewards, axis=0).sum().backward()
    assert max(np.abs(g).max() for g in agent.actor_store.grads().values()) > 0
    assert all(n.grad is None for _, n in m.store.items())


def test_slow_value_is_ema():
    m = small_model(seed=6)
    agent = _imag_agent(m, horizon=2)
    ema = {k: v.copy() for k, v in agent.value_store.arrays().items()}
    for i in range(4):
        agent.update(m, m.initial_state(2), NoiseSource(i))
        for k, v in agent.value_store.arrays().items():
            ema[k] = 0.98 * ema[k] + 0.02 * v
    for k, v in agent.slow_store.arrays().items():
        np.testing.assert_allclose(v, ema[k], atol=1e-12, rtol=0)


def test_exploration_noise_scale():
    m = small_model()
    agent = _imag_agent(m)
    agent.actor_store.fill_(0.0)
    a = agent.act(np.zeros((20_000, m.feature_dim)), np.random.default_rng(0), explore=True)
    assert abs(a.std() - 0.3) < 0.01
    assert np.all(agent.act(np.zeros((3, m.feature_dim)), np.random.default_rng(0), explore=False) == 0.0)
