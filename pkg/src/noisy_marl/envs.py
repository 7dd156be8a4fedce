"""Desk-scale cooperative environments and a vectorized runner.

Every environment here is a one-step game: two agents pick one of three
actions, both receive the same reward and the episode ends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STATE_DIM = 4

PAYOFF_MATRIX_1 = np.array([[8.0, -12.0, -12.0],
                            [-12.0, 0.0, 0.0],
                            [-12.0, 0.0, 0.0]])

PAYOFF_MATRIX_2 = np.array([[12.0, 0.0, 10.0],
                            [0.0, 10.0, 10.0],
                            [10.0, 10.0, 10.0]])

DECOUPLED_PAYOFF = np.array([1.0, 0.0, -1.0])


@dataclass
class Transition:
    state: np.ndarray
    obs: np.ndarray
    actions: np.ndarray
    reward: float
    next_state: np.ndarray
    next_obs: np.ndarray
    terminal: bool


class OneStepGame:
    """Shared-reward one-step game with a constant zero state.

    Observations are the one-hot agent id. The private generator is seeded on
    reset but the games themselves are deterministic.
    """

    n_agents = 2
    n_actions = 3
    horizon = 1
    state_dim = STATE_DIM
    obs_dim = 2

    def __init__(self):
        self.rng = np.random.default_rng(0)
        self.t = 0

    def reward(self, actions) -> float:
        raise NotImplementedError

    def joint_payoff(self) -> np.ndarray:
        """Reward for every joint action, shape (n_actions,) * n_agents."""
        out = np.zeros((self.n_actions,) * self.n_agents)
        for idx in np.ndindex(*out.shape):
            out[idx] = self.reward(idx)
        return out

    def state(self) -> np.ndarray:
        return np.zeros(self.state_dim)

    def observations(self) -> np.ndarray:
        return np.eye(self.n_agents)

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        return self.state(), self.observations()

    def step(self, actions) -> Transition:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_agents,):
            raise ValueError(f"expected {self.n_agents} actions, got shape {actions.shape}")
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise ValueError(f"actions {actions.tolist()} outside 0..{self.n_actions - 1}")
        if self.t >= self.horizon:
            raise RuntimeError("step() called on a finished episode; call reset()")
        state, obs = self.state(), self.observations()
        r = float(self.reward(actions))
        self.t += 1
        return Transition(state, obs, actions, r, self.state(), self.observations(), self.t >= self.horizon)


class MatrixGame(OneStepGame):
    def __init__(self, payoff):
        super().__init__()
        self.payoff = np.asarray(payoff, dtype=np.float64)
        if self.payoff.shape != (3, 3):
            raise ValueError("payoff must be 3x3")

    def reward(self, actions) -> float:
        return self.payoff[actions[0], actions[1]]


class DecoupledBandit(OneStepGame):
    """Reward depends only on agent two's action."""

    def __init__(self, payoff=DECOUPLED_PAYOFF):
        super().__init__()
        self.payoff = np.asarray(payoff, dtype=np.float64)

    def reward(self, actions) -> float:
        return self.payoff[actions[1]]


ENV_NAMES = ("matrix1", "matrix2", "decoupled-bandit")


def make_env(name: str) -> OneStepGame:
    if name == "matrix1":
        return MatrixGame(PAYOFF_MATRIX_1)
    if name == "matrix2":
        return MatrixGame(PAYOFF_MATRIX_2)
    if name == "decoupled-bandit":
        return DecoupledBandit()
    raise ValueError(f"unknown environment {name!r}; choose from {', '.join(ENV_NAMES)}")


@dataclass
class VecStep:
    state: np.ndarray       # (E, S) state the actions were taken in
    obs: np.ndarray         # (E, N, d)
    reward: np.ndarray      # (E,)
    terminal: np.ndarray    # (E,) bool
    next_state: np.ndarray  # (E, S) after auto-reset
    next_obs: np.ndarray    # (E, N, d) after auto-reset


class VecEnv:
    """Steps ``count`` copies of one environment in lockstep.

    Sub-environment k is seeded ``base_seed + k``. Finished episodes are reset
    immediately; ``next_*`` fields then describe the fresh episode.
    """

    def __init__(self, name: str, count: int = 32, base_seed: int = 0, stacked_frames: int = 1):
        if count < 1:
            raise ValueError("count must be >= 1")
        self.name = name
        self.envs = [make_env(name) for _ in range(count)]
        self.count = count
        self.base_seed = base_seed
        self.stacked_frames = stacked_frames
        proto = self.envs[0]
        self.n_agents, self.n_actions = proto.n_agents, proto.n_actions
        self.state_dim = proto.state_dim
        self.obs_dim = proto.obs_dim * stacked_frames
        self.episodes = 0
        self._frames: np.ndarray | None = None
        self._state: np.ndarray | None = None

    def _stack_reset(self, k: int, obs: np.ndarray) -> None:
        d = obs.shape[-1]
        self._frames[k] = 0.0
        self._frames[k, :, -d:] = obs

    def _stack_push(self, k: int, obs: np.ndarray) -> None:
        d = obs.shape[-1]
        self._frames[k, :, :-d] = self._frames[k, :, d:]
        self._frames[k, :, -d:] = obs

    def reset(self) -> tuple[np.ndarray, np.ndarray]:
        self._frames = np.zeros((self.count, self.n_agents, self.obs_dim))
        self._state = np.zeros((self.count, self.state_dim))
        for k, env in enumerate(self.envs):
            s, o = env.reset(self.base_seed + k)
            self._state[k] = s
            self._stack_reset(k, o)
        return self._state.copy(), self._frames.copy()

    def step(self, actions) -> VecStep:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.count, self.n_agents):
            raise ValueError(f"expected actions of shape {(self.count, self.n_agents)}, got {actions.shape}")
        state, obs = self._state.copy(), self._frames.copy()
        reward = np.zeros(self.count)
        terminal = np.zeros(self.count, dtype=bool)
        for k, env in enumerate(self.envs):
            tr = env.step(actions[k])
            reward[k] = tr.reward
            terminal[k] = tr.terminal
            if tr.terminal:
                s, o = env.reset()
                self._state[k] = s
                self._stack_reset(k, o)
                self.episodes += 1
            else:
                self._state[k] = tr.next_state
                self._stack_push(k, tr.next_obs)
        return VecStep(state, obs, reward, terminal, self._state.copy(), self._frames.copy())


def vec_env(name: str, count: int = 32, base_seed: int = 0, stacked_frames: int = 1) -> VecEnv:
    return VecEnv(name, count, base_seed, stacked_frames)
