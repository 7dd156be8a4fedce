import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisy_marl import algos
from noisy_marl import autodiff as ad
from noisy_marl.autodiff import Tensor, finite_difference_check
from noisy_marl.nets import QmixNets
from noisy_marl.oracle import discounted_return_minus_value, reference_gae


def leaf(x):
    return Tensor(x, requires_grad=True)


# -- GAE -----------------------------------------------------------------------

def test_gae_single_step_is_td_residual():
    adv = algos.compute_gae([8.0], [3.0, 0.0], [True], 0.99, 0.95)
    assert adv.tolist() == [5.0]


def test_gae_lambda_zero_is_td_residual():
    r = np.array([1.0, -2.0, 0.5, 3.0])
    v = np.array([0.1, 0.4, -0.3, 0.2, 0.7])
    d = np.array([False, True, False, False])
    adv = algos.compute_gae(r, v, d, 0.9, 0.0)
    deltas = r + 0.9 * v[1:] * (1 - d) - v[:-1]
    np.testing.assert_array_equal(adv, deltas)


def test_gae_hand_computed_example():
    # deltas [0.698, -0.299, 2.1]; A2 = 2.1, A1 = -0.299 + .9405 * 2.1, A0 = 0.698 + .9405 * A1
    adv = algos.compute_gae([1.0, 0.0, 2.0], [0.5, 0.2, -0.1, 0.0], [0, 0, 0], 0.99, 0.95)
    np.testing.assert_allclose(adv, [2.274325025, 1.67605, 2.1], rtol=0, atol=1e-12)
    np.testing.assert_allclose(adv, reference_gae([1.0, 0.0, 2.0], [0.5, 0.2, -0.1, 0.0], [0, 0, 0], 0.99, 0.95),
                               atol=1e-12)


def test_gae_length_mismatch():
    with pytest.raises(ValueError, match="compute_gae"):
        algos.compute_gae([1.0, 2.0], [0.0, 0.0], [0, 0], 0.9, 0.9)


def test_gae_carries_trailing_axes():
    rng = np.random.default_rng(0)
    r = rng.standard_normal((6, 3, 2))
    v = rng.standard_normal((7, 3, 2))
    d = rng.random((6, 3, 2)) < 0.3
    adv = algos.compute_gae(r, v, d, 0.97, 0.9)
    for e in range(3):
        for i in range(2):
            np.testing.assert_allclose(adv[:, e, i], reference_gae(r[:, e, i], v[:, e, i], d[:, e, i], 0.97, 0.9),
                                       atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_gae_lambda_one_equals_discounted_return_minus_value(length, seed):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(length)
    v = rng.standard_normal(length + 1)
    d = np.zeros(length, dtype=bool)
    adv = algos.compute_gae(r, v, d, 0.95, 1.0)
    np.testing.assert_allclose(adv, discounted_return_minus_value(r, v, d, 0.95), atol=1e-10)


def test_returns_equal_advantage_plus_value():
    v = np.array([0.5, 0.2, -0.1, 0.0])
    adv = algos.compute_gae([1.0, 0.0, 2.0], v, [0, 0, 0], 0.99, 0.95)
    np.testing.assert_array_equal(algos.gae_returns(adv, v), adv + v[:3])


# -- normalization and noise mixing --------------------------------------------

def test_normalize_mean_zero_std_one():
    out = algos.normalize_advantages([1.0, 2.0, 3.0])
    assert abs(out.mean()) < 1e-9
    assert abs(out.std() - 1.0) < 1e-7  # std + 1e-8 in the denominator


def test_normalize_constant_batch_is_zero():
    np.testing.assert_array_equal(algos.normalize_advantages([5.0, 5.0, 5.0]), [0.0, 0.0, 0.0])


def test_normalize_idempotent():
    x = np.random.default_rng(1).standard_normal((4, 8, 2)) * 3 + 1
    once = algos.normalize_advantages(x)
    np.testing.assert_allclose(algos.normalize_advantages(once), once, atol=1e-9)


def test_na_mix_endpoints_and_value():
    adv = np.random.default_rng(2).standard_normal((5, 2))
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(algos.na_mix(adv, x, 0.0), adv)
    np.testing.assert_array_equal(algos.na_mix(adv, x, 1.0), np.broadcast_to(x, adv.shape))
    assert algos.na_mix(np.array([[2.0]]), np.array([-1.0]), 0.05)[0, 0] == pytest.approx(1.85, abs=1e-12)


def test_na_mix_rejects_bad_alpha_and_shapes():
    with pytest.raises(ValueError):
        algos.na_mix(np.zeros((2, 2)), np.zeros(2), 1.5)
    with pytest.raises(ValueError):
        algos.na_mix(np.zeros((2, 3)), np.zeros(2), 0.1)


# -- policy objectives -----------------------------------------------------------

def test_ppo_objective_at_unit_ratio_is_mean_advantage():
    logp = leaf(np.log([0.2, 0.5, 0.3]))
    adv = np.array([1.0, -2.0, 0.5])
    obj, ratio = algos.ppo_clip_objective(logp, logp.data.copy(), adv, 0.2)
    np.testing.assert_array_equal(ratio, 1.0)
    assert obj.item() == pytest.approx(adv.mean(), abs=1e-15)


def test_ppo_objective_clips_large_ratio():
    logp = leaf([math.log(1.5)])
    obj, _ = algos.ppo_clip_objective(logp, np.array([0.0]), np.array([1.0]), 0.2)
    assert obj.item() == pytest.approx(1.2)
    ad.backward(obj)
    assert logp.grad[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.5))
def test_ppo_term_never_exceeds_unclipped(seed, eps):
    rng = np.random.default_rng(seed)
    logp = rng.standard_normal(16) * 0.5
    old = rng.standard_normal(16) * 0.5
    adv = rng.standard_normal(16)
    r = np.exp(logp - old)
    terms = np.minimum(r * adv, np.clip(r, 1 - eps, 1 + eps) * adv)
    assert (terms <= r * adv + 1e-12).all()
    obj, _ = algos.ppo_clip_objective(Tensor(logp), old, adv, eps)
    assert obj.item() == pytest.approx(terms.mean(), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_ppo_objective_invariant_to_common_shift(seed, shift):
    rng = np.random.default_rng(seed)
    logp, old, adv = rng.standard_normal(8) * 0.3, rng.standard_normal(8) * 0.3, rng.standard_normal(8)
    a, _ = algos.ppo_clip_objective(Tensor(logp), old, adv, 0.2)
    b, _ = algos.ppo_clip_objective(Tensor(logp + shift), old + shift, adv, 0.2)
    assert a.item() == pytest.approx(b.item(), abs=1e-12)


def test_ppo_objective_non_finite_ratio():
    with pytest.raises(FloatingPointError, match="non-finite ratio"):
        algos.ppo_clip_objective(Tensor([800.0]), np.array([0.0]), np.array([1.0]), 0.2)


def test_infinite_clip_equals_unclipped_surrogate():
    logp = Tensor([0.3, -0.2])
    obj, _ = algos.ppo_clip_objective(logp, np.zeros(2), np.array([1.0, 2.0]), math.inf)
    assert obj.item() == pytest.approx(np.mean(np.exp([0.3, -0.2]) * [1.0, 2.0]))


def test_entropy_examples():
    assert algos.entropy_bonus(Tensor(np.zeros((1, 3)))).item() == pytest.approx(math.log(3))
    assert algos.entropy_bonus(Tensor([[100.0, 0.0, 0.0]])).item() == pytest.approx(0.0, abs=1e-40)
    logits = leaf(np.zeros((2, 3)))
    ad.backward(algos.entropy_bonus(logits))
    np.testing.assert_allclose(logits.grad, 0.0, atol=1e-15)


def test_value_loss_examples():
    assert algos.value_loss(Tensor([1.0, 3.0]), [1.0, 3.0]).item() == 0.0
    assert algos.value_loss(Tensor([0.0, 0.0]), [1.0, 3.0]).item() == 5.0
    v = {"v": leaf(np.random.default_rng(0).standard_normal(6))}
    target = np.random.default_rng(1).standard_normal(6)
    assert finite_difference_check(lambda: algos.value_loss(v["v"], target), v, tolerance=1e-6).passed


def test_ppo_plus_entropy_loss_gradient():
    rng = np.random.default_rng(5)
    p = {"logits": leaf(rng.standard_normal((8, 3)))}
    acts = rng.integers(0, 3, size=8)
    old = np.take_along_axis(np.log(np.full((8, 3), 1 / 3)), acts[:, None], axis=-1)[:, 0]
    adv = rng.standard_normal(8)

    def loss():
        logp = ad.gather(ad.log_softmax(p["logits"]), acts)
        obj, _ = algos.ppo_clip_objective(logp, old, adv, 0.2)
        return ad.negate(obj + 0.01 * algos.entropy_bonus(p["logits"]))

    assert finite_difference_check(loss, p, tolerance=1e-4).passed


# -- noise bank ---------------------------------------------------------------------

def make_bank(interval=math.inf, sigma=1.0, seed=0):
    return algos.NoiseBank(4, 10, sigma, np.random.default_rng(seed), interval)


def test_noise_bank_scale():
    bank = algos.NoiseBank(2000, 10, 2.0, np.random.default_rng(0))
    assert bank.vectors.std() == pytest.approx(2.0, rel=0.02)
    assert make_bank(sigma=0.0).vectors.max() == 0.0


def test_no_shuffle_with_infinite_interval():
    bank = make_bank()
    before = bank.vectors.copy()
    for ep in range(0, 1_000_001, 997):
        algos.shuffle_noise(bank, ep)
    algos.shuffle_noise(bank, 1_000_000)
    np.testing.assert_array_equal(bank.vectors, before)


def test_shuffle_only_at_interval_multiples_and_preserves_vectors():
    bank = make_bank(interval=100)
    key = np.sort(bank.vectors.ravel())
    for ep in range(1, 1001):
        algos.shuffle_noise(bank, ep)
    assert bank.shuffles == list(range(100, 1001, 100))
    np.testing.assert_array_equal(np.sort(bank.vectors.ravel()), key)
    assert sorted(map(tuple, bank.vectors)) == sorted(map(tuple, make_bank(interval=100).vectors))


def test_hyperparams_validation():
    algos.HyperParams()
    for bad in ({"gamma": 1.0}, {"gae_lambda": 1.5}, {"clip_eps": 0.0}, {"alpha": -0.1}):
        with pytest.raises(ValueError):
            algos.HyperParams(**bad)


# -- QMIX -------------------------------------------------------------------------------

def qmix_batch(rng, B=6):
    obs = np.tile(np.eye(2), (B, 1, 1))
    return {"obs": obs, "state": np.zeros((B, 4)), "actions": rng.integers(0, 3, size=(B, 2)),
            "reward": rng.standard_normal(B) * 5, "next_obs": obs, "next_state": np.zeros((B, 4)),
            "terminal": np.ones(B)}


def test_qmix_one_step_target_is_reward():
    rng = np.random.default_rng(0)
    nets = QmixNets(2, 3, 2, 4, rng)
    batch = qmix_batch(rng)
    np.testing.assert_array_equal(algos.qmix_td_targets(nets, batch, 0.99), batch["reward"])


def test_qmix_loss_zero_when_q_tot_equals_reward():
    rng = np.random.default_rng(1)
    nets = QmixNets(2, 3, 2, 4, rng)
    batch = qmix_batch(rng)
    qs = nets.agent_qs(batch["obs"])
    chosen = np.stack([q.data[np.arange(6), batch["actions"][:, i]] for i, q in enumerate(qs)], axis=-1)
    batch["reward"] = nets.mixer.forward(chosen, batch["state"]).data.copy()
    assert algos.qmix_td_loss(nets, nets, batch, 0.99).item() == pytest.approx(0.0, abs=1e-24)


def test_qmix_bootstraps_non_terminal():
    rng = np.random.default_rng(2)
    nets = QmixNets(2, 3, 2, 4, rng)
    batch = qmix_batch(rng)
    batch["terminal"] = np.zeros(6)
    targets = algos.qmix_td_targets(nets, batch, 0.5)
    greedy = np.stack([q.data.max(axis=-1) for q in nets.agent_qs(batch["next_obs"])], axis=-1)
    expected = batch["reward"] + 0.5 * nets.mixer.forward(greedy, batch["next_state"]).data
    np.testing.assert_allclose(targets, expected, atol=1e-12)


def test_qmix_td_loss_gradient():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        nets = QmixNets(2, 3, 2, 4, rng)
        batch = qmix_batch(rng)
        batch["state"] = rng.standard_normal((6, 4))
        assert finite_difference_check(lambda: algos.qmix_td_loss(nets, nets, batch, 0.99), nets.params).passed


def test_epsilon_schedule():
    assert algos.epsilon_schedule(0, 100_000) == 1.0
    assert algos.epsilon_schedule(50_000, 100_000) == pytest.approx(0.525)
    assert algos.epsilon_schedule(100_000, 100_000) == pytest.approx(0.05)
    assert algos.epsilon_schedule(10**7, 100_000) == pytest.approx(0.05)
