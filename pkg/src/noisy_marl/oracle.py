"""Brute-force ground truth for one-step games and advantage estimators.

Nothing here imports from the training code; these routines exist to check it.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

MAX_JOINT_ACTIONS = 10_000


class TabularPolicy:
    """One probability row per agent."""

    def __init__(self, rows: Sequence[Sequence[float]]):
        self.rows = [np.asarray(r, dtype=np.float64) for r in rows]
        for i, r in enumerate(self.rows):
            if np.any(r < 0) or abs(r.sum() - 1.0) > 1e-12:
                raise ValueError(f"agent {i}: not a probability row: {r.tolist()}")

    @classmethod
    def uniform(cls, n_agents: int, n_actions: int) -> TabularPolicy:
        return cls([np.full(n_actions, 1.0 / n_actions)] * n_agents)

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> TabularPolicy:
        return cls([np.eye(n_actions)[a] for a in actions])

    def __len__(self) -> int:
        return len(self.rows)


def _check_enumerable(env) -> None:
    if env.horizon != 1:
        raise ValueError("oracle only handles one-step games")
    if env.n_actions ** env.n_agents > MAX_JOINT_ACTIONS:
        raise ValueError(f"{env.n_actions ** env.n_agents} joint actions exceed the enumeration limit")


def exact_expected_return(env, policy: TabularPolicy) -> float:
    """Sum over joint actions of prod_i pi_i(a_i) * r(a)."""
    _check_enumerable(env)
    total = 0.0
    for joint in itertools.product(range(env.n_actions), repeat=env.n_agents):
        weight = 1.0
        for i, a in enumerate(joint):
            weight *= policy.rows[i][a]
        if weight:
            total += weight * env.reward(joint)
    return total


def exact_value_function(env, policy: TabularPolicy) -> Callable[[np.ndarray], float]:
    """V(s) for the single decision state; the post-step state is terminal."""
    v0 = exact_expected_return(env, policy)
    return lambda state: v0


def marginal_advantage(env, policy: TabularPolicy, agent: int, action: int,
                       value_fn: Callable[[np.ndarray], float], gamma: float = 0.99) -> float:
    """E over the other agents' actions of r + gamma * V(s') - V(s), with V(terminal) = 0."""
    _check_enumerable(env)
    s = np.zeros(env.state_dim)
    v_s = float(value_fn(s))
    others = [j for j in range(env.n_agents) if j != agent]
    total = 0.0
    for rest in itertools.product(range(env.n_actions), repeat=len(others)):
        joint = [0] * env.n_agents
        joint[agent] = action
        weight = 1.0
        for j, a in zip(others, rest):
            joint[j] = a
            weight *= policy.rows[j][a]
        if weight:
            v_next = 0.0  # one-step games end after the joint action
            total += weight * (env.reward(tuple(joint)) + gamma * v_next - v_s)
    return total


def expected_td_residual(env, policy: TabularPolicy, value_fn, gamma: float = 0.99) -> float:
    """E over the joint policy of r + gamma * V(s') - V(s)."""
    return exact_expected_return(env, policy) - float(value_fn(np.zeros(env.state_dim)))


def reference_gae(rewards, values, terminals, gamma: float, lam: float) -> np.ndarray:
    """GAE as an explicit weighted sum of TD residuals, O(T^2).

    A_t = sum_{l >= 0} (gamma * lam)^l * delta_{t+l}, truncated after the
    first terminal step at or after t.
    """
    rewards = [float(r) for r in np.asarray(rewards, dtype=np.float64).ravel()]
    values = [float(v) for v in np.asarray(values, dtype=np.float64).ravel()]
    terminals = [bool(d) for d in np.asarray(terminals).ravel()]
    T = len(rewards)
    if len(values) != T + 1 or len(terminals) != T:
        raise ValueError("reference_gae: need len(values) == len(rewards) + 1 == len(terminals) + 1")
    out = np.zeros(T)
    for t in range(T):
        acc = 0.0
        weight = 1.0
        for k in range(t, T):
            bootstrap = 0.0 if terminals[k] else values[k + 1]
            delta = rewards[k] + gamma * bootstrap - values[k]
            acc += weight * delta
            if terminals[k]:
                break
            weight *= gamma * lam
        out[t] = acc
    return out


def discounted_return_minus_value(rewards, values, terminals, gamma: float) -> np.ndarray:
    """Monte-Carlo return (bootstrapped at the buffer end) minus v_t."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    T = len(rewards)
    out = np.zeros(T)
    for t in range(T):
        g, disc = 0.0, 1.0
        ended = False
        for k in range(t, T):
            g += disc * rewards[k]
            disc *= gamma
            if terminals[k]:
                ended = True
                break
        if not ended:
            g += disc * values[T]
        out[t] = g - values[t]
    return out


def payoff_table(env) -> str:
    """Text table of rewards for every joint action of a two-agent game."""
    _check_enumerable(env)
    if env.n_agents != 2:
        raise ValueError("payoff_table needs a two-agent game")
    n = env.n_actions
    grid = np.array([[env.reward((a, b)) for b in range(n)] for a in range(n)])
    best = np.argwhere(grid == grid.max())
    header = "a1\\a2 " + " ".join(f"{b:>7d}" for b in range(n))
    lines = [header]
    for a in range(n):
        lines.append(f"{a:>5d} " + " ".join(f"{grid[a, b]:>7.2f}" for b in range(n)))
    lines.append(f"max {grid.max():g} at " + ", ".join(f"({a},{b})" for a, b in best))
    return "\n".join(lines)
