"""Experiment configuration: defaults, validation and flat text round-trip."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .algos import HyperParams
from .envs import ENV_NAMES

ALGOS = ("mapg", "mappo", "ippo", "nv-mapg", "nv-mappo", "nv-ippo", "na-mappo", "qmix")
NETWORKS = ("mlp", "rnn")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algo: str = "mappo"
    env: str = "matrix1"
    seeds: int = 5
    base_seed: int = 0
    total_steps: int = 20_000
    eval_interval: int = 200
    eval_episodes: int = 32
    num_envs: int = 32
    buffer_length: int = 1
    # optimisation
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    lr: float = 5e-4
    epochs: int = 10
    minibatches: int = 1
    max_grad_norm: float = 10.0
    returns: str = "gae"
    # networks
    network: str = "mlp"
    stacked_frames: int = 1
    gain: float = 0.01
    share_params: bool = True
    # noise
    sigma: float | None = None
    alpha: float | None = None
    noise_dim: int = 10
    shuffle_interval: float = math.inf
    resample_na_noise: bool = False
    value_pad: int = 0
    # qmix
    qmix_lr: float = 1e-3
    qmix_batch: int = 128
    qmix_buffer: int = 5000
    epsilon_anneal_steps: int = 100_000
    epsilon_finish: float = 0.05
    target_update_interval: int = 200
    extras: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def noisy_value(self) -> bool:
        return self.algo.startswith("nv-")

    @property
    def noisy_advantage(self) -> bool:
        return self.algo == "na-mappo"

    @property
    def independent_critic(self) -> bool:
        return self.algo in ("ippo", "nv-ippo")

    @property
    def policy_gradient(self) -> bool:
        return self.algo in ("mapg", "nv-mapg")

    def hyperparams(self) -> HyperParams:
        return HyperParams(self.gamma, self.gae_lambda, self.clip_eps, self.entropy_coef,
                           self.alpha or 0.0, self.lr, self.epochs, self.minibatches)

    def resolved(self) -> ExperimentConfig:
        """Validate and fill variant-dependent defaults; returns a new config."""
        cfg = dataclasses.replace(self)
        if cfg.extras:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(cfg.extras))}")
        if cfg.algo not in ALGOS:
            raise ConfigError(f"unknown algo {cfg.algo!r}; choose from {', '.join(ALGOS)}")
        if cfg.env not in ENV_NAMES:
            raise ConfigError(f"unknown env {cfg.env!r}; choose from {', '.join(ENV_NAMES)}")
        if cfg.network not in NETWORKS:
            raise ConfigError(f"unknown network {cfg.network!r}")
        if cfg.returns not in ("gae", "nstep"):
            raise ConfigError("returns must be 'gae' or 'nstep'")
        if cfg.noisy_value:
            cfg.sigma = 1.0 if cfg.sigma is None else cfg.sigma
            if cfg.sigma < 0:
                raise ConfigError("sigma must be non-negative")
            if cfg.value_pad:
                raise ConfigError("value_pad is for noiseless critics; nv-* already append noise_dim inputs")
        elif cfg.sigma is not None:
            raise ConfigError(f"sigma only applies to nv-* algorithms, not {cfg.algo}")
        if cfg.noisy_advantage:
            cfg.alpha = 0.05 if cfg.alpha is None else cfg.alpha
        elif cfg.alpha is not None:
            raise ConfigError(f"alpha only applies to na-mappo, not {cfg.algo}")
        if cfg.resample_na_noise and not cfg.noisy_advantage:
            raise ConfigError("resample_na_noise only applies to na-mappo")
        if cfg.algo == "qmix" and cfg.value_pad:
            raise ConfigError("value_pad does not apply to qmix")
        for name in ("seeds", "total_steps", "eval_interval", "eval_episodes", "num_envs",
                     "buffer_length", "epochs", "minibatches", "stacked_frames", "noise_dim",
                     "qmix_batch", "qmix_buffer", "target_update_interval"):
            if getattr(cfg, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if cfg.value_pad < 0:
            raise ConfigError("value_pad must be >= 0")
        if cfg.gain <= 0:
            raise ConfigError("gain must be positive")
        if cfg.shuffle_interval < 1:
            raise ConfigError("shuffle_interval must be >= 1 (inf disables shuffling)")
        if cfg.network == "rnn" and cfg.minibatches > cfg.num_envs:
            raise ConfigError("rnn minibatches split environments; need minibatches <= num_envs")
        try:
            cfg.hyperparams()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def seed_list(self) -> list[int]:
        return [self.base_seed + k for k in range(self.seeds)]


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig) if f.name != "extras"}


def infer_value(text: str):
    """Parse a config literal: bool, int, float (incl. inf), none, else string."""
    s = text.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    if low in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def coerce(name: str, value):
    kind = FIELD_TYPES[name]
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"{name} may not be none")
    if kind.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} expects a number, got {value!r}")
        return float(value)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{name} expects an integer, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{name} expects true/false, got {value!r}")
        return value
    return str(value)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = infer_value(value)
    return out


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = dataclasses.replace(base) if base is not None else ExperimentConfig()
    unknown = sorted(k for k in values if k not in FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for k, v in values.items():
        setattr(cfg, k, coerce(k, v))
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    cfg = config_from_mapping(parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = config_from_mapping(overrides, cfg)
    return cfg


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{name} = {format_value(getattr(cfg, name))}\n" for name in FIELD_TYPES)
