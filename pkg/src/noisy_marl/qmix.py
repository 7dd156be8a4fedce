"""QMIX baseline: epsilon-greedy agent utilities, monotonic mixer, replayed TD updates."""

from __future__ import annotations

import math

import numpy as np

from . import algos
from . import autodiff as ad
from .config import ExperimentConfig
from .envs import VecEnv
from .nets import QmixNets
from .optim import Adam, clip_grad_norm
from .trainer import ENV_SEED_STRIDE, TrainingDiverged, seed_streams


class ReplayBuffer:
    def __init__(self, capacity: int, n_agents: int, obs_dim: int, state_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.next_obs = np.zeros_like(self.obs)
        self.state = np.zeros((capacity, state_dim))
        self.next_state = np.zeros_like(self.state)
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.terminal = np.zeros(capacity)
        self.size = 0
        self.pos = 0

    def add_batch(self, obs, state, actions, reward, next_obs, next_state, terminal) -> None:
        for k in range(len(reward)):
            p = self.pos
            self.obs[p], self.state[p], self.actions[p] = obs[k], state[k], actions[k]
            self.reward[p], self.terminal[p] = reward[k], float(terminal[k])
            self.next_obs[p], self.next_state[p] = next_obs[k], next_state[k]
            self.pos = (p + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(0, self.size, size=batch)
        return {
            "obs": self.obs[idx], "state": self.state[idx], "actions": self.actions[idx],
            "reward": self.reward[idx], "next_obs": self.next_obs[idx],
            "next_state": self.next_state[idx], "terminal": self.terminal[idx],
        }


class QmixLearner:
    def __init__(self, cfg: ExperimentConfig, seed: int):
        cfg = cfg.resolved()
        if cfg.algo != "qmix":
            raise ValueError("QmixLearner needs algo = qmix")
        if cfg.network != "mlp":
            raise ValueError("the QMIX baseline uses feed-forward agent networks")
        self.cfg, self.seed = cfg, seed
        streams = seed_streams(seed)
        self.venv = VecEnv(cfg.env, cfg.num_envs, base_seed=seed * ENV_SEED_STRIDE,
                           stacked_frames=cfg.stacked_frames)
        n, d = self.venv.n_agents, self.venv.obs_dim
        self.n_agents, self.n_actions = n, self.venv.n_actions
        n_nets = 1 if cfg.share_params else n
        init_rng = np.random.default_rng(streams["policy_init"])
        self.nets = QmixNets(d, self.n_actions, n, self.venv.state_dim, init_rng, n_nets)
        self.target = QmixNets(d, self.n_actions, n, self.venv.state_dim, init_rng, n_nets)
        self.target.load_state_dict(self.nets.state_dict())
        self.opt = Adam(self.nets.params, lr=cfg.qmix_lr)
        self.replay = ReplayBuffer(cfg.qmix_buffer, n, d, self.venv.state_dim)
        self.action_rng = np.random.default_rng(streams["actions"])
        self.replay_rng = np.random.default_rng(streams["replay"])
        self.updates = 0
        self.total_steps = 0
        self._state, self._obs = self.venv.reset()
        self._ep_return = np.zeros(cfg.num_envs)

    @property
    def epsilon(self) -> float:
        return algos.epsilon_schedule(self.total_steps, self.cfg.epsilon_anneal_steps,
                                      finish=self.cfg.epsilon_finish)

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        """obs (E, N, d) -> (E, N, A)."""
        return np.stack([q.data for q in self.nets.agent_qs(obs)], axis=1)

    def act(self, obs: np.ndarray, epsilon: float) -> np.ndarray:
        greedy = self.q_values(obs).argmax(axis=-1)
        if epsilon <= 0.0:
            return greedy
        explore = self.action_rng.random(greedy.shape) < epsilon
        random_actions = self.action_rng.integers(0, self.n_actions, size=greedy.shape)
        return np.where(explore, random_actions, greedy)

    def update(self) -> float:
        batch = self.replay.sample(self.cfg.qmix_batch, self.replay_rng)
        loss = algos.qmix_td_loss(self.nets, self.target, batch, self.cfg.gamma)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite TD loss at step {self.total_steps} (seed {self.seed})")
        params = self.nets.params
        ad.zero_grad(params)
        grads = ad.backward(loss, params)
        ad.zero_grad(params)
        clip_grad_norm(grads, self.cfg.max_grad_norm)
        self.opt.step(grads)
        self.updates += 1
        if self.updates % self.cfg.target_update_interval == 0:
            self.target.load_state_dict(self.nets.state_dict())
        return loss.item()

    def iterate(self) -> dict[str, float]:
        completed, losses = [], []
        for _ in range(self.cfg.buffer_length):
            actions = self.act(self._obs, self.epsilon)
            step = self.venv.step(actions)
            self.replay.add_batch(step.obs, step.state, actions, step.reward,
                                  step.next_obs, step.next_state, step.terminal)
            self._ep_return += step.reward
            for k in np.flatnonzero(step.terminal):
                completed.append(self._ep_return[k])
                self._ep_return[k] = 0.0
            self._state, self._obs = step.next_state, step.next_obs
            self.total_steps += self.cfg.num_envs
            if self.replay.size >= self.cfg.qmix_batch:
                losses.append(self.update())
        return {
            "train_return": float(np.mean(completed)) if completed else math.nan,
            "loss_value": float(np.mean(losses)) if losses else math.nan,
            "epsilon": self.epsilon,
        }

    def greedy_policy(self):
        return (lambda obs, hidden: (self.act(obs, 0.0), None)), (lambda count: None)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"qmix.{k}": v for k, v in self.nets.state_dict().items()}

    def load_state_dict(self, state) -> None:
        self.nets.load_state_dict({k[len("qmix."):]: v for k, v in state.items() if k.startswith("qmix.")})
        self.target.load_state_dict(self.nets.state_dict())

    def greedy_q_table(self) -> np.ndarray:
        """Q_tot for every joint action at the initial state, shape (A,) * N (two agents)."""
        env = VecEnv(self.cfg.env, 1, stacked_frames=self.cfg.stacked_frames)
        state, obs = env.reset()
        qs = self.q_values(obs)[0]
        A = self.n_actions
        joint = np.array([(a, b) for a in range(A) for b in range(A)])
        chosen = np.stack([qs[0, joint[:, 0]], qs[1, joint[:, 1]]], axis=-1)
        q_tot = self.nets.mixer.forward(chosen, np.repeat(state, len(joint), axis=0)).data
        return q_tot.reshape(A, A)
