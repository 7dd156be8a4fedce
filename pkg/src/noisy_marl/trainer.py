"""Rollout collection and updates for the MAPG / MAPPO / IPPO families.

One :class:`OnPolicyLearner` owns everything for a single seed: networks,
optimizers, the vectorized environment, the noise bank and four independent
random streams (environment seeding, action sampling, minibatch shuffling,
noise). Keeping the streams apart is what lets the noiseless limits of the
noisy variants reproduce vanilla MAPPO bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import algos
from . import autodiff as ad
from .config import ExperimentConfig
from .envs import VecEnv
from .nets import CentralValueNet, GruPolicy, MlpPolicy
from .optim import Adam, clip_grad_norm

ENV_SEED_STRIDE = 10_000


class TrainingDiverged(FloatingPointError):
    pass


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    names = ("policy_init", "value_init", "actions", "minibatch", "noise", "replay")
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


def sample_categorical(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random(p.shape[:-1])[..., None]
    return np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class RolloutBuffer:
    """Arrays indexed (timestep, env, agent)."""

    obs: np.ndarray          # (T, E, N, d)
    state: np.ndarray        # (T, E, S)
    actions: np.ndarray      # (T, E, N)
    logp: np.ndarray         # (T, E, N) behaviour log-probs
    logits: np.ndarray       # (T, E, N, A) behaviour logits
    rewards: np.ndarray      # (T, E)
    values: np.ndarray       # (T, E, N)
    terminals: np.ndarray    # (T, E)
    starts: np.ndarray       # (T, E) first step of an episode
    bootstrap: np.ndarray    # (E, N) value of the state after the last step
    hidden0: np.ndarray | None  # (E, N, H) recurrent state at buffer start
    value_features: np.ndarray  # (T, E, N, F)
    completed_returns: list

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def transitions(self) -> int:
        return self.rewards.size


class OnPolicyLearner:
    def __init__(self, cfg: ExperimentConfig, seed: int):
        cfg = cfg.resolved()
        if cfg.algo == "qmix":
            raise ValueError("use QmixLearner for qmix")
        self.cfg = cfg
        self.seed = seed
        self.hp = cfg.hyperparams()
        streams = seed_streams(seed)
        self.venv = VecEnv(cfg.env, cfg.num_envs, base_seed=seed * ENV_SEED_STRIDE,
                           stacked_frames=cfg.stacked_frames)
        n, d, a = self.venv.n_agents, self.venv.obs_dim, self.venv.n_actions
        self.n_agents, self.obs_dim, self.n_actions = n, d, a

        n_nets = 1 if cfg.share_params else n
        policy_rng = np.random.default_rng(streams["policy_init"])
        policy_cls = GruPolicy if cfg.network == "rnn" else MlpPolicy
        self.policies = [policy_cls(d, a, policy_rng, gain=cfg.gain) for _ in range(n_nets)]

        value_in = d if cfg.independent_critic else self.venv.state_dim
        self.extra_dim = cfg.noise_dim if cfg.noisy_value else cfg.value_pad
        value_rng = np.random.default_rng(streams["value_init"])
        n_value = n_nets if cfg.independent_critic else 1
        self.values = [CentralValueNet(value_in, value_rng, noise_dim=self.extra_dim) for _ in range(n_value)]

        self.noise = algos.NoiseBank(n, cfg.noise_dim, cfg.sigma if cfg.sigma is not None else 0.0,
                                     np.random.default_rng(streams["noise"]), cfg.shuffle_interval)
        self.action_rng = np.random.default_rng(streams["actions"])
        self.minibatch_rng = np.random.default_rng(streams["minibatch"])

        self.policy_opt = Adam(self.policy_params(), lr=cfg.lr)
        self.value_opt = Adam(self.value_params(), lr=cfg.lr)

        self.total_steps = 0
        self._state, self._obs = self.venv.reset()
        self._starts = np.ones(cfg.num_envs, dtype=bool)
        self._hidden = self._initial_hidden()
        self._ep_return = np.zeros(cfg.num_envs)

    # -- parameter views -------------------------------------------------

    def policy_for(self, i: int):
        return self.policies[i if len(self.policies) > 1 else 0]

    def value_for(self, i: int):
        return self.values[i if len(self.values) > 1 else 0]

    def policy_params(self) -> dict:
        if len(self.policies) == 1:
            return {f"policy.{k}": p for k, p in self.policies[0].params.items()}
        return {f"policy{i}.{k}": p for i, net in enumerate(self.policies) for k, p in net.params.items()}

    def value_params(self) -> dict:
        if len(self.values) == 1:
            return {f"value.{k}": p for k, p in self.values[0].params.items()}
        return {f"value{i}.{k}": p for i, net in enumerate(self.values) for k, p in net.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self.policy_params().items()}
        out.update({k: p.data.copy() for k, p in self.value_params().items()})
        return out

    def load_state_dict(self, state) -> None:
        for k, p in {**self.policy_params(), **self.value_params()}.items():
            if k not in state:
                raise KeyError(f"checkpoint lacks {k}")
            p.data[...] = state[k]

    # -- helpers ------------------------------------------------------------

    @property
    def recurrent(self) -> bool:
        return self.cfg.network == "rnn"

    def _initial_hidden(self):
        if not self.recurrent:
            return None
        return np.zeros((self.cfg.num_envs, self.n_agents, self.policies[0].hidden))

    def agent_extra(self, i: int) -> np.ndarray:
        """Vector appended to agent i's value input: its noise or zero padding."""
        if self.cfg.noisy_value:
            return self.noise.vectors[i]
        return np.zeros(self.extra_dim)

    def value_features(self, state: np.ndarray, obs: np.ndarray) -> np.ndarray:
        """state (..., S), obs (..., N, d) -> (..., N, F)."""
        feats = []
        for i in range(self.n_agents):
            base = obs[..., i, :] if self.cfg.independent_critic else state
            extra = np.broadcast_to(self.agent_extra(i), base.shape[:-1] + (self.extra_dim,))
            feats.append(np.concatenate([base, extra], axis=-1))
        return np.stack(feats, axis=-2)

    def value_numpy(self, feats: np.ndarray) -> np.ndarray:
        """feats (..., N, F) -> (..., N) without recording gradients."""
        out = np.empty(feats.shape[:-1])
        for i in range(self.n_agents):
            x = feats[..., i, :]
            out[..., i] = self.value_for(i).forward(x.reshape(-1, x.shape[-1])).data.reshape(x.shape[:-1])
        return out

    def act(self, obs: np.ndarray, hidden, greedy: bool = False, rng=None):
        """obs (E, N, d) -> actions (E, N), logits (E, N, A), new hidden."""
        E = obs.shape[0]
        logits = np.empty((E, self.n_agents, self.n_actions))
        new_hidden = None if hidden is None else np.empty_like(hidden)
        for i in range(self.n_agents):
            net = self.policy_for(i)
            if self.recurrent:
                out, h = net.forward(obs[:, i], hidden[:, i])
                new_hidden[:, i] = h.data
            else:
                out, _ = net.forward(obs[:, i])
            logits[:, i] = out.data
        if greedy:
            actions = logits.argmax(axis=-1)
        else:
            actions = sample_categorical(logits, rng if rng is not None else self.action_rng)
        return actions, logits, new_hidden

    # -- rollout ------------------------------------------------------------

    def collect_rollouts(self) -> RolloutBuffer:
        cfg = self.cfg
        T, E, N = cfg.buffer_length, cfg.num_envs, self.n_agents
        obs_b = np.zeros((T, E, N, self.obs_dim))
        state_b = np.zeros((T, E, self.venv.state_dim))
        act_b = np.zeros((T, E, N), dtype=np.int64)
        logp_b = np.zeros((T, E, N))
        logits_b = np.zeros((T, E, N, self.n_actions))
        rew_b = np.zeros((T, E))
        term_b = np.zeros((T, E), dtype=bool)
        start_b = np.zeros((T, E), dtype=bool)
        hidden0 = None if self._hidden is None else self._hidden.copy()
        completed = []
        for t in range(T):
            obs_b[t], state_b[t], start_b[t] = self._obs, self._state, self._starts
            actions, logits, new_hidden = self.act(self._obs, self._hidden)
            act_b[t] = actions
            logits_b[t] = logits
            logp_b[t] = np.take_along_axis(log_softmax_np(logits), actions[..., None], axis=-1)[..., 0]
            step = self.venv.step(actions)
            rew_b[t], term_b[t] = step.reward, step.terminal
            self._ep_return += step.reward
            for k in np.flatnonzero(step.terminal):
                completed.append(self._ep_return[k])
                self._ep_return[k] = 0.0
            self._state, self._obs = step.next_state, step.next_obs
            self._starts = step.terminal.copy()
            if new_hidden is not None:
                new_hidden[step.terminal] = 0.0
                self._hidden = new_hidden
        feats = self.value_features(state_b, obs_b)
        values = self.value_numpy(feats)
        bootstrap = self.value_numpy(self.value_features(self._state, self._obs))
        self.total_steps += T * E
        return RolloutBuffer(obs_b, state_b, act_b, logp_b, logits_b, rew_b, values, term_b, start_b,
                             bootstrap, hidden0, feats, completed)

    # -- update -------------------------------------------------------------

    def advantages(self, buf: RolloutBuffer) -> tuple[np.ndarray, np.ndarray]:
        """Per-agent normalized (and, for NA, noise-mixed) advantages and return targets."""
        N = self.n_agents
        rewards = np.repeat(buf.rewards[..., None], N, axis=-1)
        terminals = np.repeat(buf.terminals[..., None], N, axis=-1)
        values_ext = np.concatenate([buf.values, buf.bootstrap[None]], axis=0)
        adv = algos.compute_gae(rewards, values_ext, terminals, self.hp.gamma, self.hp.gae_lambda)
        if self.cfg.returns == "gae":
            returns = algos.gae_returns(adv, buf.values)
        else:
            returns = algos.nstep_returns(rewards, buf.bootstrap, terminals, self.hp.gamma)
        adv = algos.normalize_advantages(adv)
        if self.cfg.noisy_advantage:
            adv = algos.na_mix(adv, self.noise.scalars, self.cfg.alpha)
        return adv, returns

    def _minibatches(self, T: int, E: int, count: int) -> list[np.ndarray]:
        if self.recurrent:
            perm = self.minibatch_rng.permutation(E)
        else:
            perm = self.minibatch_rng.permutation(T * E)
        return np.array_split(perm, count)

    def _agent_logits(self, i: int, buf: RolloutBuffer, idx: np.ndarray) -> ad.Tensor:
        """Logits for agent i on the minibatch, flattened in (t, env) order."""
        net = self.policy_for(i)
        if self.recurrent:
            h0 = buf.hidden0[idx, i]
            seq = net.forward_sequence(buf.obs[:, idx, i], buf.starts[:, idx], h0)
            return ad.concat(seq, axis=0)
        T, E = buf.rewards.shape
        flat_obs = buf.obs[:, :, i].reshape(T * E, -1)[idx]
        out, _ = net.forward(flat_obs)
        return out

    def _select(self, arr: np.ndarray, i: int, idx: np.ndarray) -> np.ndarray:
        """arr (T, E, N, ...) -> agent i's minibatch entries in (t, env) order."""
        a = arr[:, :, i]
        if self.recurrent:
            return a[:, idx].reshape((-1,) + a.shape[2:])
        return a.reshape((-1,) + a.shape[2:])[idx]

    def policy_loss(self, buf: RolloutBuffer, adv: np.ndarray, idx: np.ndarray):
        N = self.n_agents
        objective, entropy = 0.0, 0.0
        ratios = []
        for i in range(N):
            logits = self._agent_logits(i, buf, idx)
            acts = self._select(buf.actions, i, idx)
            logp = ad.gather(ad.log_softmax(logits), acts)
            a_i = self._select(adv, i, idx)
            if self.cfg.policy_gradient:
                obj = algos.pg_objective(logp, a_i)
                ratio = np.ones(acts.shape)
            else:
                obj, ratio = algos.ppo_clip_objective(logp, self._select(buf.logp, i, idx), a_i, self.hp.clip_eps)
            objective = objective + obj
            entropy = entropy + algos.entropy_bonus(logits)
            ratios.append(ratio)
        objective = objective * (1.0 / N)
        entropy = entropy * (1.0 / N)
        loss = ad.negate(objective + self.hp.entropy_coef * entropy)
        return loss, objective, entropy, np.concatenate(ratios)

    def value_loss(self, buf: RolloutBuffer, returns: np.ndarray, idx: np.ndarray):
        total = 0.0
        for i in range(self.n_agents):
            feats = self._select(buf.value_features, i, idx)
            v = self.value_for(i).forward(feats)
            total = total + algos.value_loss(v, self._select(returns, i, idx))
        return total * (1.0 / self.n_agents)

    def _apply(self, loss: ad.Tensor, params: dict, opt: Adam) -> float:
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite loss {loss.data} at step {self.total_steps} (seed {self.seed})")
        ad.zero_grad(params)
        grads = ad.backward(loss, params)
        ad.zero_grad(params)
        norm = clip_grad_norm(grads, self.cfg.max_grad_norm)
        if not np.isfinite(norm):
            raise TrainingDiverged(f"non-finite gradient norm at step {self.total_steps} (seed {self.seed})")
        opt.step(grads)
        return norm

    def train_iteration(self, buf: RolloutBuffer) -> dict[str, float]:
        adv, returns = self.advantages(buf)
        T, E = buf.rewards.shape
        epochs, n_mb = self.hp.epochs, self.hp.minibatches
        if self.cfg.policy_gradient:
            epochs, n_mb = 1, 1
        pparams, vparams = self.policy_params(), self.value_params()
        for epoch in range(epochs):
            last = epoch == epochs - 1
            pl, vl, clipped, count = [], [], 0, 0
            for idx in self._minibatches(T, E, n_mb):
                vloss = self.value_loss(buf, returns, idx)
                self._apply(vloss, vparams, self.value_opt)
                try:
                    ploss, _, _, ratio = self.policy_loss(buf, adv, idx)
                except TrainingDiverged:
                    raise
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"{exc} (step {self.total_steps}, seed {self.seed})") from exc
                self._apply(ploss, pparams, self.policy_opt)
                if last:
                    pl.append(ploss.item())
                    vl.append(vloss.item())
                    clipped += int(np.sum(np.abs(ratio - 1.0) > self.hp.clip_eps))
                    count += ratio.size
        if self.cfg.noisy_advantage and self.cfg.resample_na_noise:
            self.noise.resample_scalars()
        ent = algos.entropy_of(buf.logits)
        return {
            "train_return": float(np.mean(buf.completed_returns)) if buf.completed_returns else math.nan,
            "policy_entropy": float(ent.mean()),
            "value_std_agents": float(buf.values.std(axis=-1).mean()),
            "loss_policy": float(np.mean(pl)),
            "loss_value": float(np.mean(vl)),
            "clip_fraction": clipped / max(count, 1),
        }

    def after_episodes(self, before: int, after: int) -> None:
        if not self.cfg.noisy_value:
            return
        for ep in range(before + 1, after + 1):
            algos.shuffle_noise(self.noise, ep)

    def iterate(self) -> dict[str, float]:
        before = self.venv.episodes
        buf = self.collect_rollouts()
        self.after_episodes(before, self.venv.episodes)
        metrics = self.train_iteration(buf)
        del buf  # on-policy: the batch is never reused
        return metrics

    # -- evaluation ---------------------------------------------------------

    def greedy_policy(self):
        def policy(obs, hidden):
            actions, _, new_hidden = self.act(obs, hidden, greedy=True)
            return actions, new_hidden
        return policy, self._initial_hidden_for


    def _initial_hidden_for(self, count: int):
        if not self.recurrent:
            return None
        return np.zeros((count, self.n_agents, self.policies[0].hidden))

    def policy_probs(self) -> np.ndarray:
        """(N, A) action probabilities at the first observation of an episode."""
        env = VecEnv(self.cfg.env, 1, stacked_frames=self.cfg.stacked_frames)
        _, obs = env.reset()
        _, logits, _ = self.act(obs, self._initial_hidden_for(1), greedy=True)
        z = logits[0] - logits[0].max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)


def evaluate(learner, env_name: str | None = None, episodes: int = 32, seed: int = 0) -> float:
    """Mean return of greedy (argmax, lowest index on ties) episodes."""
    cfg = learner.cfg
    venv = VecEnv(env_name or cfg.env, episodes, base_seed=seed, stacked_frames=cfg.stacked_frames)
    policy, init_hidden = learner.greedy_policy()
    _, obs = venv.reset()
    hidden = init_hidden(episodes)
    returns = np.zeros(episodes)
    done = np.zeros(episodes, dtype=bool)
    while not done.all():
        actions, hidden = policy(obs, hidden)
        step = venv.step(actions)
        returns += np.where(done, 0.0, step.reward)
        done |= step.terminal
        obs = step.next_obs
        if hidden is not None:
            hidden[step.terminal] = 0.0
    return float(returns.mean())
