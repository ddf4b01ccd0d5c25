import math

import numpy as np
import pytest

from dxrag.grpo import (
    GroupBatch,
    ToyPolicy,
    TrainingDiverged,
    group_advantages,
    grpo_objective,
    kl_est,
    kl_term,
    softmax,
    toy_grad,
    toy_loss,
    train_toy,
)
from dxrag.reward import StageSchedule, stage_weights


def single_token_batch(logps, rewards, **kw):
    return GroupBatch("q", [[0]] * len(logps), rewards, [[lp] for lp in logps], **kw)


def random_config(rng):
    v = int(rng.integers(2, 9))
    g = int(rng.integers(2, 9))
    logits = rng.normal(size=v) * 2
    temperature = float(rng.uniform(0.5, 2.0))
    choices = rng.integers(0, v, size=g)
    adv = group_advantages(rng.normal(size=g))
    ref = softmax(rng.normal(size=v))
    beta = float(rng.uniform(0, 0.5))
    return logits, temperature, choices, adv, beta, ref


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestAdvantages:
    def test_two_rewards(self):
        np.testing.assert_allclose(group_advantages([0, 1]), [-1, 1])

    def test_flat_group(self):
        np.testing.assert_array_equal(group_advantages([0.3] * 5), np.zeros(5))

    def test_normalization_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = group_advantages(rng.normal(size=int(rng.integers(2, 20))) * 5)
            assert abs(a.mean()) < 1e-9 and abs(a.std() - 1) < 1e-9

    def test_needs_two(self):
        with pytest.raises(ValueError):
            group_advantages([1.0])

    def test_shift_invariance(self):
        r = np.array([0.1, 0.7, 0.3, 0.9])
        np.testing.assert_allclose(group_advantages(r + 5.0), group_advantages(r), atol=1e-9)


class TestKl:
    def test_hand_value(self):
        assert kl_term([0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.9 * math.log(1.8) + 0.1 * math.log(0.2), abs=1e-12)
        assert kl_term([0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.3681, abs=1e-4)

    def test_identical_is_zero(self):
        assert kl_term([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(6), size=10_000)
        q = rng.dirichlet(np.ones(6), size=10_000)
        assert np.all(kl_term(p, q) >= -1e-15)

    def test_zero_probabilities_floored(self):
        assert np.isfinite(kl_term([1.0, 0.0], [0.0, 1.0]))

    def test_sampled_estimator(self):
        np.testing.assert_allclose(kl_est([-0.1, -2.0], [-0.2, -1.0]), [0.1, -1.0])


class TestObjective:
    def test_hand_value(self):
        loss = grpo_objective(single_token_batch([math.log(0.5), math.log(0.25)], [1, 0]), beta=0)
        assert loss == pytest.approx(0.5 * (-math.log(0.5) + math.log(0.25)), abs=1e-12)
        assert loss == pytest.approx(-0.3466, abs=1e-4)

    def test_zero_advantages(self):
        assert grpo_objective(single_token_batch([-1.0, -2.0], [0.5, 0.5]), beta=0) == 0.0

    def test_advantage_broadcast_over_tokens(self):
        b = GroupBatch("q", [[0, 1], [0]], [1.0, 0.0], [[-1.0, -3.0], [-2.0]])
        assert grpo_objective(b, 0) == pytest.approx(0.5 * (-1 * -2.0 + 1 * -2.0))

    def test_monotone_in_beta(self):
        b = single_token_batch([-0.5, -1.5], [1, 0], logp_ref=[[-1.0], [-2.0]])
        kls, est = b.kl()
        assert est == "sampled"
        assert np.mean([k.mean() for k in kls]) == pytest.approx(0.5)
        losses = [grpo_objective(b, beta) for beta in (0, 0.1, 1.0)]
        assert losses[0] < losses[1] < losses[2]

    def test_exact_kl_used_when_distributions_given(self):
        dist = [np.array([[0.9, 0.1]]), np.array([[0.9, 0.1]])]
        ref = [np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]])]
        b = single_token_batch([-0.1, -2.3], [1, 1], dist_cur=dist, dist_ref=ref)
        assert grpo_objective(b, beta=1.0) == pytest.approx(0.3681, abs=1e-4)

    def test_alignment_checked(self):
        with pytest.raises(ValueError):
            GroupBatch("q", [[0, 1]], [1.0], [[-1.0]])

    def test_shift_invariance(self):
        b1 = single_token_batch([-0.2, -1.0, -0.7], [0.1, 0.5, 0.9])
        b2 = single_token_batch([-0.2, -1.0, -0.7], [3.1, 3.5, 3.9])
        assert abs(grpo_objective(b1, 0) - grpo_objective(b2, 0)) < 1e-9


class TestToyGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            logits, t, choices, adv, beta, ref = random_config(rng)
            analytic = toy_grad(logits, t, choices, adv, beta, ref)
            numeric = central_difference(lambda z: toy_loss(z, t, choices, adv, beta, ref), logits)
            scale = max(np.abs(numeric).max(), 1e-12)
            assert np.abs(analytic - numeric).max() / scale < 1e-6

    def test_policy_probs_sum_to_one(self):
        p = ToyPolicy(np.array([1000.0, -1000.0, 3.0]), 0.7)
        assert abs(p.probs.sum() - 1) < 1e-12
        np.testing.assert_allclose(np.exp(p.log_probs()), p.probs)


class TestTraining:
    def test_two_element_convergence(self):
        policy = ToyPolicy(np.zeros(2))
        trace = train_toy(policy, lambda i, w: [1.0, 0.0][i], stage_weights(4), iters=200, G=8,
                          beta=0.0, lr=0.5, seed=0)
        assert trace.final_probs[0] >= 0.95

    def test_zero_learning_rate_constant(self):
        trace = train_toy(ToyPolicy(np.zeros(3)), lambda i, w: float(i), stage_weights(4), 20, 4, 0.01, 0.0, 0)
        assert len(set(trace.mean_rewards())) == 1

    def test_stage_weights_logged(self):
        trace = train_toy(ToyPolicy(np.zeros(2)), lambda i, w: w.w_d * i, StageSchedule(), 8, 4, 0.0, 0.1, 0)
        for row in trace.rows:
            w = stage_weights(row["stage"])
            assert (row["w_s"], row["w_m"], row["w_d"]) == (w.w_s, w.w_m, w.w_d)
        assert [r["stage"] for r in trace.rows] == [1, 1, 2, 2, 3, 3, 4, 4]

    def test_nan_guard(self):
        with pytest.raises(TrainingDiverged):
            train_toy(ToyPolicy(np.zeros(2)), lambda i, w: float("nan"), stage_weights(4), 5, 4, 0.0, 0.1, 0)

    def test_g_must_be_two(self):
        with pytest.raises(ValueError):
            train_toy(ToyPolicy(np.zeros(2)), lambda i, w: 0.0, stage_weights(4), 5, 1)

    def test_seed_reproducible_and_exports(self):
        run = lambda: train_toy(ToyPolicy(np.zeros(3)), lambda i, w: float(i), stage_weights(4), 10, 4, 0.01, 0.3, 7)  # noqa: E731
        a, b = run(), run()
        assert a.to_json() == b.to_json()
        assert a.to_csv().splitlines()[0].startswith("iteration,stage")
        assert a.summary()["iterations"] == 10
