import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisy_marl.algos import compute_gae
from noisy_marl.envs import DECOUPLED_PAYOFF, DecoupledBandit, make_env
from noisy_marl.oracle import (TabularPolicy, discounted_return_minus_value, exact_expected_return,
                               exact_value_function, expected_td_residual, marginal_advantage, payoff_table,
                               reference_gae)


def random_policy(rng, n_agents=2, n_actions=3):
    return TabularPolicy([rng.dirichlet(np.ones(n_actions)) for _ in range(n_agents)])


def test_uniform_matrix1_expected_return():
    assert exact_expected_return(make_env("matrix1"), TabularPolicy.uniform(2, 3)) == pytest.approx(-40 / 9, abs=1e-12)


@pytest.mark.parametrize("name,value", [("matrix1", 8.0), ("matrix2", 12.0)])
def test_deterministic_optimum(name, value):
    assert exact_expected_return(make_env(name), TabularPolicy.deterministic([0, 0], 3)) == value


def test_policy_rows_validated():
    with pytest.raises(ValueError, match="agent 1"):
        TabularPolicy([[1.0, 0.0, 0.0], [0.5, 0.6, -0.1]])


def test_non_enumerable_env_rejected():
    class Big:
        horizon, n_agents, n_actions = 1, 5, 10

    with pytest.raises(ValueError, match="enumeration limit"):
        exact_expected_return(Big(), TabularPolicy.uniform(5, 10))


def test_marginal_advantage_matrix1_row_zero():
    adv = marginal_advantage(make_env("matrix1"), TabularPolicy.uniform(2, 3), 0, 0, lambda s: 0.0)
    assert adv == pytest.approx(-16 / 3, abs=1e-12)


@pytest.mark.parametrize("action", [0, 1, 2])
def test_irrelevant_agent_has_zero_marginal_advantage(action):
    env = DecoupledBandit()
    policy = TabularPolicy.uniform(2, 3)
    v = exact_value_function(env, policy)
    assert marginal_advantage(env, policy, 0, action, v) == 0.0


@pytest.mark.parametrize("action", [0, 1, 2])
def test_relevant_agent_marginal_advantage(action):
    env = DecoupledBandit()
    policy = TabularPolicy.uniform(2, 3)
    v = exact_value_function(env, policy)
    assert v(None) == pytest.approx(0.0)
    assert marginal_advantage(env, policy, 1, action, v) == pytest.approx(DECOUPLED_PAYOFF[action] - v(None))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["matrix1", "matrix2", "decoupled-bandit"]))
def test_expected_return_is_multilinear(seed, name):
    rng = np.random.default_rng(seed)
    env = make_env(name)
    p, q, other = (rng.dirichlet(np.ones(3)) for _ in range(3))
    t = rng.random()
    mixed = exact_expected_return(env, TabularPolicy([t * p + (1 - t) * q, other]))
    split = (t * exact_expected_return(env, TabularPolicy([p, other]))
             + (1 - t) * exact_expected_return(env, TabularPolicy([q, other])))
    assert mixed == pytest.approx(split, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["matrix1", "matrix2", "decoupled-bandit"]), st.integers(0, 1))
def test_marginal_advantages_average_to_td_residual(seed, name, agent):
    rng = np.random.default_rng(seed)
    env = make_env(name)
    policy = random_policy(rng)
    v0 = rng.standard_normal() * 5
    v = lambda s: v0  # noqa: E731
    total = sum(policy.rows[agent][a] * marginal_advantage(env, policy, agent, a, v) for a in range(3))
    assert total == pytest.approx(expected_td_residual(env, policy, v), abs=1e-12)


def test_payoff_table_text():
    text = payoff_table(make_env("matrix1"))
    assert "max 8 at (0,0)" in text
    assert len(text.splitlines()) == 5


def test_reference_gae_single_step_matches_recursion():
    for r, v0, v1, d in [(8.0, 3.0, 1.0, True), (-1.0, 0.5, 2.0, False)]:
        np.testing.assert_array_equal(reference_gae([r], [v0, v1], [d], 0.99, 0.95),
                                      compute_gae([r], [v0, v1], [d], 0.99, 0.95))


@pytest.mark.parametrize("lam", [0.0, 0.5, 0.95, 1.0])
def test_reference_gae_random_cross_check(lam):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 51))
        r, v = rng.standard_normal(T), rng.standard_normal(T + 1)
        d = rng.random(T) < 0.2
        np.testing.assert_allclose(compute_gae(r, v, d, 0.99, lam), reference_gae(r, v, d, 0.99, lam),
                                   rtol=0, atol=1e-10)


def test_reference_gae_lambda_one_identity_with_terminals():
    rng = np.random.default_rng(9)
    r, v = rng.standard_normal(40), rng.standard_normal(41)
    d = rng.random(40) < 0.1
    np.testing.assert_allclose(reference_gae(r, v, d, 0.97, 1.0), discounted_return_minus_value(r, v, d, 0.97),
                               atol=1e-10)


def test_reference_gae_length_check():
    with pytest.raises(ValueError):
        reference_gae([1.0], [1.0], [False], 0.9, 0.9)
