import numpy as np
import pytest

from vgm2 import autodiff as ad
from vgm2 import losses, metrics
from vgm2 import markers as mk


def separated_posterior(tight=50.0):
    same = mk.RelationPosterior(
        conc=np.ones(1), m=np.array([0.5]), kappa=np.array([tight]), alpha=np.array([tight]), beta=np.array([0.5])
    )
    diff = mk.RelationPosterior(
        conc=np.ones(1), m=np.array([5.0]), kappa=np.array([tight]), alpha=np.array([tight]), beta=np.array([0.5])
    )
    return mk.MarkerPosterior(diff=diff, same=same)


def random_marker(rng, k=3):
    def rel():
        return mk.RelationPosterior(
            conc=rng.uniform(0.5, 3.0, k),
            m=rng.uniform(0.0, 4.0, k),
            kappa=rng.uniform(0.3, 3.0, k),
            alpha=rng.uniform(1.3, 5.0, k),
            beta=rng.uniform(0.3, 3.0, k),
        )

    return mk.MarkerPosterior(diff=rel(), same=rel())


class TestLambdaSchedule:
    def test_cosine_hits_zero_at_horizon(self):
        w = losses.LossWeights(lambda0=0.3, schedule="cosine", horizon=40)
        assert w.lambda_at(40) == pytest.approx(0.0, abs=1e-15)

    def test_cosine_halves_at_midpoint(self):
        w = losses.LossWeights(lambda0=0.3, schedule="cosine", horizon=40)
        assert w.lambda_at(20) == pytest.approx(0.15)

    def test_constant_schedule(self):
        w = losses.LossWeights(lambda0=0.2, schedule="constant")
        assert w.lambda_at(0) == w.lambda_at(999) == 0.2

    def test_negative_weights_rejected(self):
        with pytest.raises(losses.LossError):
            losses.LossWeights(gamma=-1.0)


class TestSimLoss:
    def test_correct_confident_predictions_give_tiny_loss(self):
        post = separated_posterior()
        priors = mk.RelationPriors(0.5, 0.5)
        s = np.array([0.5, 0.5, 5.0, 5.0])
        u = np.array([1.0, 1.0, 0.0, 0.0])
        assert float(losses.sim_loss(s, u, post, priors)) < 1e-3

    def test_uninformative_markers_give_log_two_per_pair(self):
        rng = np.random.default_rng(0)
        rel = random_marker(rng).same
        post = mk.MarkerPosterior(diff=rel, same=rel.copy())
        priors = mk.RelationPriors(0.5, 0.5)
        s = rng.uniform(0, 5, 8)
        u = rng.integers(0, 2, 8).astype(float)
        assert float(losses.sim_loss(s, u, post, priors)) == pytest.approx(8 * np.log(2), rel=1e-12)

    def test_four_pair_hand_summed_oracle(self):
        rng = np.random.default_rng(1)
        post = random_marker(rng)
        priors = mk.RelationPriors(0.4, 0.6)
        s = np.array([0.3, 1.1, 2.2, 4.0])
        u = np.array([1.0, 0.0, 1.0, 0.0])
        p1 = mk.pi1(s, post, priors)
        oracle = -np.sum(u * np.log(p1) + (1 - u) * np.log(1 - p1))
        assert float(losses.sim_loss(s, u, post, priors)) == pytest.approx(oracle, abs=1e-10)

    def test_empty_batch_rejected(self):
        post = separated_posterior()
        with pytest.raises(losses.LossError):
            losses.sim_loss(np.empty(0), np.empty(0), post, mk.RelationPriors(0.5, 0.5))


class TestSoftEce:
    def test_agreeing_half_confidences_score_zero(self):
        conf = np.full(40, 0.5)
        labels = np.array([0.0, 1.0] * 20)
        assert float(losses.soft_ece(conf, labels)) < 1e-3

    def test_overconfident_wrong_scores_the_gap(self):
        conf = np.full(50, 0.9)
        labels = np.zeros(50)
        assert float(losses.soft_ece(conf, labels)) == pytest.approx(0.9, abs=0.02)

    def test_calibrated_synthetic_set_close_to_hard_ece(self):
        # within each bin the label frequency equals the confidence
        rng = np.random.default_rng(2)
        conf, labels = [], []
        for center in [0.1, 0.3, 0.5, 0.7, 0.9]:
            n = 400
            conf.extend([center] * n)
            labels.extend(rng.binomial(1, center, n))
        conf = np.array(conf)
        labels = np.array(labels, dtype=float)
        soft = float(losses.soft_ece(conf, labels, n_bins=15))
        hard = metrics.hard_ece(conf, labels, n_bins=15)
        assert abs(soft - hard) < 0.02

    def test_soft_converges_to_hard_as_tau_shrinks(self):
        rng = np.random.default_rng(3)
        conf = rng.uniform(0.02, 0.98, 500)
        labels = (rng.uniform(size=500) < conf**1.3).astype(float)
        hard = metrics.hard_ece(conf, labels, n_bins=15)
        gaps = [abs(float(losses.soft_ece(conf, labels, 15, tau)) - hard) for tau in (0.2, 0.05, 0.01)]
        assert gaps[0] > gaps[1] > gaps[2]

    def test_value_in_unit_interval(self):
        rng = np.random.default_rng(4)
        conf = rng.uniform(0.01, 0.99, 100)
        labels = rng.integers(0, 2, 100).astype(float)
        v = float(losses.soft_ece(conf, labels))
        assert 0.0 <= v <= 1.0


class TestTotalLoss:
    def test_zero_weights_reduce_to_umap(self):
        w = losses.LossWeights(gamma=0.0, eta=0.0, lambda0=0.0, schedule="constant")
        assert float(losses.total_loss(3.25, 9.9, 9.9, 9.9, w, round_t=0)) == 3.25

    def test_nonfinite_term_is_named(self):
        w = losses.LossWeights()
        with pytest.raises(losses.LossError, match="cal"):
            losses.total_loss(1.0, 1.0, np.nan, 1.0, w, round_t=0)

    def test_weighted_sum(self):
        w = losses.LossWeights(gamma=2.0, eta=0.5, lambda0=0.4, schedule="constant")
        out = float(losses.total_loss(1.0, 1.0, 1.0, 1.0, w, round_t=7))
        assert out == pytest.approx(1.0 + 2.0 + 0.5 + 0.4)


def build_marker_vars(tape, post):
    raw = mk.posterior_to_raw(post)
    raw_vars = {k: tape.variable(v) for k, v in raw.items()}
    return raw_vars, mk.raw_to_posterior(raw_vars)


def finite_diff(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


class TestGradients:
    def test_sim_loss_gradient_wrt_marker_params(self):
        rng = np.random.default_rng(5)
        post = random_marker(rng)
        priors = mk.RelationPriors(0.5, 0.5)
        s = rng.uniform(0.2, 4.5, 12)
        u = rng.integers(0, 2, 12).astype(float)
        raw = mk.posterior_to_raw(post)

        def value():
            return float(losses.sim_loss(s, u, mk.raw_to_posterior(raw), priors))

        tape = ad.Tape()
        raw_vars = {k: tape.variable(v) for k, v in raw.items()}
        loss = losses.sim_loss(s, u, mk.raw_to_posterior(raw_vars), priors)
        grads = tape.backward(loss)
        for key, arr in raw.items():
            got = tape.grad(grads, raw_vars[key])
            want = finite_diff(value, arr)
            assert np.allclose(got, want, rtol=1e-4, atol=1e-6), key

    def test_soft_ece_gradient_wrt_confidences(self):
        rng = np.random.default_rng(6)
        conf = rng.uniform(0.1, 0.9, 20)
        labels = rng.integers(0, 2, 20).astype(float)

        def value():
            return float(losses.soft_ece(conf, labels))

        tape = ad.Tape()
        cv = tape.variable(conf)
        grads = tape.backward(losses.soft_ece(cv, labels))
        got = tape.grad(grads, cv)
        want = finite_diff(value, conf)
        assert np.allclose(got, want, rtol=1e-4, atol=1e-6)

    def test_kl_gradient_wrt_raw_params(self):
        rng = np.random.default_rng(7)
        post = random_marker(rng)
        prior = random_marker(np.random.default_rng(8))
        raw = mk.posterior_to_raw(post)

        def value():
            return float(mk.total_kl(mk.raw_to_posterior(raw), prior))

        tape = ad.Tape()
        raw_vars = {k: tape.variable(v) for k, v in raw.items()}
        grads = tape.backward(mk.total_kl(mk.raw_to_posterior(raw_vars), prior))
        for key, arr in raw.items():
            got = tape.grad(grads, raw_vars[key])
            want = finite_diff(value, arr)
            assert np.allclose(got, want, rtol=1e-4, atol=1e-6), key
