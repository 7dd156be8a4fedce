"""Finite-difference checks of every training loss on small random instances."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import algos
from . import autodiff as ad
from .nets import CentralValueNet, GruPolicy, MlpPolicy, QmixNets

SMALL_HIDDEN = 8
CHECK_SEEDS = 20


@dataclass
class CheckResult:
    loss: str
    seed: int
    max_rel_error: float
    passed: bool


def _away_from_clip_edges(rng, n: int, eps: float, margin: float = 1e-3) -> np.ndarray:
    """Log-ratio offsets that keep every ratio clear of 1 - eps and 1 + eps."""
    out = rng.normal(0.0, 0.3, size=n)
    edges = np.log([1.0 - eps, 1.0 + eps])
    for k in range(n):
        while np.min(np.abs(out[k] - edges)) < margin:
            out[k] = rng.normal(0.0, 0.3)
    return out


def ppo_entropy_case(seed: int):
    rng = np.random.default_rng(seed)
    net = MlpPolicy(2, 3, rng, hidden=SMALL_HIDDEN, gain=1.0)
    obs = rng.standard_normal((16, 2))
    acts = rng.integers(0, 3, size=16)
    adv = rng.standard_normal(16)
    logits, _ = net.forward(obs)
    logp_now = ad.gather(ad.log_softmax(logits), acts).data
    logp_old = logp_now - _away_from_clip_edges(rng, 16, 0.2)

    def loss():
        logits, _ = net.forward(obs)
        logp = ad.gather(ad.log_softmax(logits), acts)
        obj, _ = algos.ppo_clip_objective(logp, logp_old, adv, 0.2)
        return ad.negate(obj + 0.01 * algos.entropy_bonus(logits))

    return loss, net.params


def value_mse_case(seed: int):
    rng = np.random.default_rng(seed)
    net = CentralValueNet(4, rng, noise_dim=10, hidden=SMALL_HIDDEN)
    x = np.concatenate([rng.standard_normal((16, 4)), rng.standard_normal((16, 10))], axis=-1)
    target = rng.standard_normal(16) * 3

    def loss():
        return algos.value_loss(net.forward(x), target)

    return loss, net.params


def _qmix_kink_distance(nets: QmixNets, obs: np.ndarray, state: np.ndarray) -> float:
    """Smallest |pre-activation| feeding a relu or abs on this batch."""
    closest = np.inf
    for net in nets.agents:
        h = obs.reshape(-1, obs.shape[-1])
        for layer in ("fc1", "fc2"):
            h = h @ net.params[f"{layer}.w"].data + net.params[f"{layer}.b"].data
            closest = min(closest, np.abs(h).min())
            h = np.maximum(h, 0.0)
    mixer = nets.mixer
    for name in ("hyper_w1", "hyper_w2"):
        pre = state @ mixer.params[f"{name}.w"].data + mixer.params[f"{name}.b"].data
        closest = min(closest, np.abs(pre).min())
    return closest


def qmix_td_case(seed: int, margin: float = 1e-3):
    rng = np.random.default_rng(seed)
    nets = QmixNets(2, 3, 2, 4, rng, hidden=SMALL_HIDDEN)
    target = QmixNets(2, 3, 2, 4, rng, hidden=SMALL_HIDDEN)
    B = 16
    # relu and abs are not differentiable at 0; redraw inputs that land within
    # a step of a kink so the central difference measures a single branch
    while True:
        obs, state = rng.standard_normal((B, 2, 2)), rng.standard_normal((B, 4))
        if _qmix_kink_distance(nets, obs, state) > margin:
            break
    batch = {
        "obs": obs, "state": state,
        "actions": rng.integers(0, 3, size=(B, 2)), "reward": rng.standard_normal(B) * 5,
        "next_obs": rng.standard_normal((B, 2, 2)), "next_state": rng.standard_normal((B, 4)),
        "terminal": (rng.random(B) < 0.5).astype(float),
    }

    def loss():
        return algos.qmix_td_loss(nets, target, batch, 0.99)

    return loss, nets.params


def gru_sequence_case(seed: int):
    rng = np.random.default_rng(seed)
    net = GruPolicy(3, 3, rng, hidden=SMALL_HIDDEN, gain=1.0)
    obs = rng.standard_normal((5, 2, 3))
    starts = np.zeros((5, 2), dtype=bool)
    starts[0] = True
    acts = rng.integers(0, 3, size=(5, 2))

    def loss():
        seq = net.forward_sequence(obs, starts)
        return ad.mean(ad.concat([ad.gather(ad.log_softmax(l), a) for l, a in zip(seq, acts)]))

    return loss, net.params


CASES: dict[str, Callable] = {
    "ppo_clip_entropy": ppo_entropy_case,
    "value_mse": value_mse_case,
    "qmix_td": qmix_td_case,
    "gru_sequence": gru_sequence_case,
}


def run_suite(seeds: int = CHECK_SEEDS, tolerance: float = 1e-4, cases=None) -> list[CheckResult]:
    results = []
    for name in cases or CASES:
        for seed in range(seeds):
            fn, params = CASES[name](seed)
            report = ad.finite_difference_check(fn, params, tolerance=tolerance)
            worst = report.worst
            results.append(CheckResult(name, seed, worst, bool(worst < tolerance and math.isfinite(worst))))
    return results
