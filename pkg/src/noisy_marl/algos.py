"""Estimators and losses shared by every training variant.

Array conventions: time is the leading axis, any trailing axes (envs,
agents) are carried through unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_EPS = 1e-8


@dataclass
class HyperParams:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    alpha: float = 0.0
    lr: float = 5e-4
    epochs: int = 10
    minibatches: int = 1

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if not self.clip_eps > 0.0:
            raise ValueError(f"clip_eps must be positive, got {self.clip_eps}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------

def compute_gae(rewards, values, terminals, gamma: float, lam: float) -> np.ndarray:
    """GAE(lambda) by backward recursion.

    ``values`` has one more leading entry than ``rewards``: the bootstrap value
    of the state after the last step. A terminal step cuts both the bootstrap
    and the recursion.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=np.float64)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or values.shape[1:] != rewards.shape[1:]:
        raise ValueError(f"compute_gae: values shape {values.shape} must be ({T + 1},) + {rewards.shape[1:]}")
    if terminals.shape != rewards.shape:
        raise ValueError(f"compute_gae: terminals shape {terminals.shape} != rewards shape {rewards.shape}")
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - terminals[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv


def gae_returns(advantages: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Return targets R = A + v (``values`` without the bootstrap row)."""
    return advantages + values[: advantages.shape[0]]


def nstep_returns(rewards, bootstrap, terminals, gamma: float) -> np.ndarray:
    """Discounted returns bootstrapped once at the end of the buffer."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=np.float64)
    out = np.zeros_like(rewards)
    running = np.asarray(bootstrap, dtype=np.float64)
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * (1.0 - terminals[t]) * running
        out[t] = running
    return out


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size == 0:
        raise ValueError("normalize_advantages: empty batch")
    return (adv - adv.mean()) / (adv.std() + NORM_EPS)


def na_mix(adv: np.ndarray, noise: np.ndarray, alpha: float) -> np.ndarray:
    """(1 - alpha) * A_b + alpha * x_i with agents on the last axis."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"na_mix: alpha must lie in [0, 1], got {alpha}")
    adv = np.asarray(adv, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if adv.shape[-1] != noise.shape[-1] or noise.ndim != 1:
        raise ValueError(f"na_mix: need one noise scalar per agent, got {noise.shape} for advantages {adv.shape}")
    return (1.0 - alpha) * adv + alpha * noise


# ---------------------------------------------------------------------------
# policy objectives
# ---------------------------------------------------------------------------

def ppo_clip_objective(logp: Tensor, logp_old, advantages, clip_eps: float) -> tuple[Tensor, np.ndarray]:
    """Mean of min(r A, clip(r, 1-eps, 1+eps) A); returns (objective, ratio)."""
    logp_old = np.asarray(logp_old, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    if logp.shape != logp_old.shape or logp.shape != advantages.shape:
        raise ValueError(f"ppo_clip_objective: shapes {logp.shape}, {logp_old.shape}, {advantages.shape} differ")
    ratio = ad.exp(logp - logp_old)
    if not np.all(np.isfinite(ratio.data)):
        bad = np.argwhere(~np.isfinite(ratio.data))[:5].tolist()
        raise FloatingPointError(
            f"ppo_clip_objective: non-finite ratio at {bad}; "
            f"logp range [{logp.data.min():.3g}, {logp.data.max():.3g}], "
            f"logp_old range [{logp_old.min():.3g}, {logp_old.max():.3g}]")
    surr1 = ratio * advantages
    if math.isinf(clip_eps):
        return ad.mean(surr1), ratio.data
    surr2 = ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    return ad.mean(ad.minimum(surr1, surr2)), ratio.data


def pg_objective(logp: Tensor, advantages) -> Tensor:
    """Plain policy-gradient surrogate mean(log pi * A)."""
    advantages = np.asarray(advantages, dtype=np.float64)
    if logp.shape != advantages.shape:
        raise ValueError(f"pg_objective: shapes {logp.shape} and {advantages.shape} differ")
    return ad.mean(logp * advantages)


def entropy_bonus(logits: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of softmax(logits) over all leading axes."""
    p = ad.softmax(logits)
    logp = ad.log_softmax(logits)
    return ad.negate(ad.mean(ad.sum(p * logp, axis=-1)))


def entropy_of(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=-1)


def value_loss(values: Tensor, returns) -> Tensor:
    returns = np.asarray(returns, dtype=np.float64)
    if values.shape != returns.shape:
        raise ValueError(f"value_loss: shapes {values.shape} and {returns.shape} differ")
    return ad.mean(ad.square(values - returns))


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

@dataclass
class NoiseBank:
    """Per-agent noise for the noisy-value and noisy-advantage variants.

    ``vectors`` (n_agents, noise_dim) are fed to the value network next to the
    state; ``scalars`` (n_agents,) are mixed into normalized advantages.
    """

    n_agents: int
    noise_dim: int
    sigma: float
    rng: np.random.Generator
    shuffle_interval: float = math.inf
    vectors: np.ndarray = field(init=False)
    scalars: np.ndarray = field(init=False)
    shuffles: list[int] = field(init=False, default_factory=list)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        self.vectors = self.sigma * self.rng.standard_normal((self.n_agents, self.noise_dim))
        self.scalars = self.rng.standard_normal(self.n_agents)

    def resample_scalars(self) -> None:
        self.scalars = self.rng.standard_normal(self.n_agents)


def shuffle_noise(bank: NoiseBank, episode: int) -> NoiseBank:
    """Permute agent-to-vector assignment when ``episode`` is a positive multiple of the interval."""
    interval = bank.shuffle_interval
    if math.isinf(interval) or episode <= 0 or episode % int(interval) != 0:
        return bank
    perm = bank.rng.permutation(bank.n_agents)
    bank.vectors = bank.vectors[perm]
    bank.shuffles.append(episode)
    return bank


# ---------------------------------------------------------------------------
# QMIX
# ---------------------------------------------------------------------------

def epsilon_schedule(step: int, anneal_steps: int, start: float = 1.0, finish: float = 0.05) -> float:
    if anneal_steps <= 0:
        return finish
    frac = min(max(step, 0) / anneal_steps, 1.0)
    return start + frac * (finish - start)


def qmix_td_targets(target_nets, batch: dict, gamma: float) -> np.ndarray:
    """r + gamma * (1 - terminal) * Q_tot^target(s', greedy individual actions)."""
    reward = np.asarray(batch["reward"], dtype=np.float64)
    terminal = np.asarray(batch["terminal"], dtype=np.float64)
    if np.all(terminal == 1.0):
        return reward.copy()
    next_qs = target_nets.agent_qs(batch["next_obs"])
    greedy = np.stack([q.data.max(axis=-1) for q in next_qs], axis=-1)
    q_next = target_nets.mixer.forward(greedy, batch["next_state"]).data
    return reward + gamma * (1.0 - terminal) * q_next


def qmix_td_loss(nets, target_nets, batch: dict, gamma: float) -> Tensor:
    """Mean squared TD error of Q_tot on a transition batch.

    ``batch`` holds obs (B, N, d), state (B, S), actions (B, N), reward (B,),
    next_obs, next_state and terminal (B,).
    """
    targets = qmix_td_targets(target_nets, batch, gamma)
    qs = nets.agent_qs(batch["obs"])
    actions = np.asarray(batch["actions"])
    chosen = [ad.gather(q, actions[:, i]) for i, q in enumerate(qs)]
    B = actions.shape[0]
    chosen = ad.concat([ad.reshape(c, (B, 1)) for c in chosen])
    q_tot = nets.mixer.forward(chosen, batch["state"])
    return ad.mean(ad.square(q_tot - targets))
