"""Policy, value and QMIX networks built on :mod:`noisy_marl.autodiff`.

All networks keep their parameters in an ordered ``name -> Tensor`` dict so
optimizers, gradient checks and checkpoints can treat them uniformly.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HIDDEN = 64
NOISE_DIM = 10
MIXER_EMBED = 32


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


class Network:
    """Base class: a named collection of leaf tensors."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _linear(self, name: str, rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0):
        self.params[f"{name}.w"] = Tensor(orthogonal(rng, (n_in, n_out), gain), requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")

    def _apply(self, name: str, x) -> Tensor:
        return ad.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {value.shape} != {p.shape}")
            p.data[...] = value

    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))


def _as_input(x, dim: int, what: str) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.shape[-1] != dim:
        raise ValueError(f"{what}: expected last dimension {dim}, got shape {x.shape}")
    return x


class MlpPolicy(Network):
    """obs -> 64 -> 64 -> logits with tanh hidden activations."""

    recurrent = False

    def __init__(self, obs_dim: int, n_actions: int, rng: np.random.Generator,
                 hidden: int = HIDDEN, gain: float = 0.01):
        super().__init__()
        self.obs_dim, self.n_actions, self.hidden = obs_dim, n_actions, hidden
        self._linear("fc1", rng, obs_dim, hidden)
        self._linear("fc2", rng, hidden, hidden)
        self._linear("out", rng, hidden, n_actions, gain)

    def forward(self, obs, hidden_state=None) -> tuple[Tensor, None]:
        if hidden_state is not None:
            raise ValueError("MlpPolicy takes no hidden state")
        x = _as_input(obs, self.obs_dim, "MlpPolicy")
        x = ad.tanh(self._apply("fc1", x))
        x = ad.tanh(self._apply("fc2", x))
        return self._apply("out", x), None

    def initial_state(self, batch: int) -> None:
        return None


class GruPolicy(Network):
    """fc embed -> single GRU cell -> fc logits.

    Gates: z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
    n = tanh(x Wn + (r*h) Un + bn), h' = (1 - z) * n + z * h.
    """

    recurrent = True

    def __init__(self, obs_dim: int, n_actions: int, rng: np.random.Generator,
                 hidden: int = HIDDEN, gain: float = 0.01):
        super().__init__()
        self.obs_dim, self.n_actions, self.hidden = obs_dim, n_actions, hidden
        self._linear("embed", rng, obs_dim, hidden)
        for gate in ("z", "r", "n"):
            self._linear(f"gru.x{gate}", rng, hidden, hidden)
            self.params[f"gru.h{gate}.w"] = Tensor(orthogonal(rng, (hidden, hidden)), requires_grad=True,
                                                   name=f"gru.h{gate}.w")
        self._linear("out", rng, hidden, n_actions, gain)

    def initial_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.hidden))

    def cell(self, x: Tensor, h) -> Tensor:
        p = self.params
        z = ad.sigmoid(self._apply("gru.xz", x) + ad.matmul(h, p["gru.hz.w"]))
        r = ad.sigmoid(self._apply("gru.xr", x) + ad.matmul(h, p["gru.hr.w"]))
        n = ad.tanh(self._apply("gru.xn", x) + ad.matmul(r * h, p["gru.hn.w"]))
        return (1.0 - z) * n + z * h

    def forward(self, obs, hidden_state=None) -> tuple[Tensor, Tensor]:
        if hidden_state is None:
            raise ValueError("GruPolicy requires a hidden state")
        x = _as_input(obs, self.obs_dim, "GruPolicy")
        h = ad.as_tensor(hidden_state)
        if h.shape != (x.shape[0], self.hidden):
            raise ValueError(f"GruPolicy: hidden state shape {h.shape} != {(x.shape[0], self.hidden)}")
        e = ad.tanh(self._apply("embed", x))
        h_new = self.cell(e, h)
        return self._apply("out", h_new), h_new

    def forward_sequence(self, obs_seq: np.ndarray, starts: np.ndarray, h0=None) -> list[Tensor]:
        """Unroll over ``obs_seq`` of shape (T, B, obs_dim).

        ``starts[t, b]`` marks the first step of an episode; the hidden state
        is zeroed there before the cell runs.
        """
        T, B = obs_seq.shape[:2]
        h = Tensor(self.initial_state(B)) if h0 is None else ad.as_tensor(h0)
        logits = []
        for t in range(T):
            keep = (1.0 - starts[t].astype(np.float64))[:, None]
            h = h * keep
            out, h = self.forward(obs_seq[t], h)
            logits.append(out)
        return logits


class CentralValueNet(Network):
    """(input ++ noise) -> 64 -> 64 -> 1.

    ``input_dim`` is the global state for centralized critics or the agent
    observation for independent ones.
    """

    def __init__(self, input_dim: int, rng: np.random.Generator, noise_dim: int = NOISE_DIM,
                 hidden: int = HIDDEN):
        super().__init__()
        self.input_dim, self.noise_dim = input_dim, noise_dim
        self._linear("fc1", rng, input_dim + noise_dim, hidden)
        self._linear("fc2", rng, hidden, hidden)
        self._linear("out", rng, hidden, 1)

    def forward(self, features) -> Tensor:
        x = _as_input(features, self.input_dim + self.noise_dim, "CentralValueNet")
        x = ad.tanh(self._apply("fc1", x))
        x = ad.tanh(self._apply("fc2", x))
        out = self._apply("out", x)
        return ad.reshape(out, out.shape[:-1])

    def value_forward_noisy(self, state, noise) -> Tensor:
        """v = V(concat(state, noise)); state may be batched, noise is one vector."""
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (self.noise_dim,):
            raise ValueError(f"noise length {noise.shape} != ({self.noise_dim},)")
        state = np.atleast_2d(np.asarray(state, dtype=np.float64))
        feats = np.concatenate([state, np.broadcast_to(noise, (state.shape[0], self.noise_dim))], axis=-1)
        return self.forward(feats)


class AgentQNet(Network):
    """Per-agent utility Q_i(o_i, .) : obs -> 64 -> 64 -> n_actions."""

    def __init__(self, obs_dim: int, n_actions: int, rng: np.random.Generator, hidden: int = HIDDEN):
        super().__init__()
        self.obs_dim, self.n_actions = obs_dim, n_actions
        self._linear("fc1", rng, obs_dim, hidden)
        self._linear("fc2", rng, hidden, hidden)
        self._linear("out", rng, hidden, n_actions)

    def forward(self, obs) -> Tensor:
        x = _as_input(obs, self.obs_dim, "AgentQNet")
        x = ad.relu(self._apply("fc1", x))
        x = ad.relu(self._apply("fc2", x))
        return self._apply("out", x)


class QMixer(Network):
    """Monotonic mixer; hypernetwork weights pass through abs()."""

    def __init__(self, n_agents: int, state_dim: int, rng: np.random.Generator, embed: int = MIXER_EMBED):
        super().__init__()
        self.n_agents, self.state_dim, self.embed = n_agents, state_dim, embed
        self._hyper("hyper_w1", rng, n_agents * embed)
        self._hyper("hyper_b1", rng, embed)
        self._hyper("hyper_w2", rng, embed)
        self._hyper("hyper_b2", rng, 1)

    def _hyper(self, name: str, rng, n_out: int):
        self._linear(name, rng, self.state_dim, n_out)
        # state may be a constant zero vector, so the bias carries the signal
        self.params[f"{name}.b"].data[...] = rng.uniform(-1.0, 1.0, n_out) / np.sqrt(max(n_out, 1))

    def forward(self, agent_qs, state) -> Tensor:
        qs = ad.as_tensor(agent_qs)
        st = ad.as_tensor(state)
        if qs.ndim != 2 or qs.shape[1] != self.n_agents:
            raise ValueError(f"QMixer: expected agent_qs (B, {self.n_agents}), got {qs.shape}")
        B = qs.shape[0]
        w1 = ad.absolute(ad.reshape(self._apply("hyper_w1", st), (B, self.n_agents, self.embed)))
        b1 = ad.reshape(self._apply("hyper_b1", st), (B, 1, self.embed))
        hidden = ad.elu(ad.matmul(ad.reshape(qs, (B, 1, self.n_agents)), w1) + b1)
        w2 = ad.absolute(ad.reshape(self._apply("hyper_w2", st), (B, self.embed, 1)))
        b2 = ad.reshape(self._apply("hyper_b2", st), (B, 1, 1))
        return ad.reshape(ad.matmul(hidden, w2) + b2, (B,))


class QmixNets:
    """Agent utilities plus mixer; ``params`` merges both under prefixes."""

    def __init__(self, obs_dim: int, n_actions: int, n_agents: int, state_dim: int,
                 rng: np.random.Generator, n_agent_nets: int = 1, hidden: int = HIDDEN):
        self.agents = [AgentQNet(obs_dim, n_actions, rng, hidden) for _ in range(n_agent_nets)]
        self.mixer = QMixer(n_agents, state_dim, rng)
        self.n_agents = n_agents

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for k, net in enumerate(self.agents):
            out.update({f"agent{k}.{n}": p for n, p in net.params.items()})
        out.update({f"mixer.{n}": p for n, p in self.mixer.params.items()})
        return out

    def agent_net(self, i: int) -> AgentQNet:
        return self.agents[i if len(self.agents) > 1 else 0]

    def agent_qs(self, obs: np.ndarray) -> list[Tensor]:
        """obs: (B, N, obs_dim) -> list of N tensors (B, n_actions)."""
        return [self.agent_net(i).forward(obs[:, i]) for i in range(self.n_agents)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data[...] = state[k]


def qmix_forward(mixer: QMixer, agent_qs, state) -> Tensor:
    return mixer.forward(agent_qs, state)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"NMRLPRM1"


def save_params(path: str | Path, params: Mapping[str, np.ndarray]) -> None:
    """Write ``(name, shape, float64 little-endian data)`` records."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    pos = 8
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out
