import json

import numpy as np
import pytest

from crowdlgp.annotators import unstack
from crowdlgp.data import LabelMatrix
from crowdlgp.graph import build_graph_prior
from crowdlgp.models import (FitConfig, FitError, IdParams, LgpParams, ModelKind, Posterior,
                             e_step_id, e_step_lgp, fit, load_model, m_step_objective_id,
                             m_step_objective_lgp, marginal_gradient, model_from_dict,
                             model_to_dict, observed_loglik, predict, save_model,
                             soft_majority_vote)
from crowdlgp.optim import finite_diff_gradient

from conftest import random_instance
from oracles import enumerate_joint


def _flat(grad):
    return np.concatenate([grad.coef, [grad.intercept], grad.w.ravel(), grad.gamma])


def _unflat(v, d, t):
    return v[:d], float(v[d]), v[d + 1:d + 1 + t * d].reshape(t, d), v[d + 1 + t * d:]


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)


class TestEStep:
    def test_no_labels_gives_classifier_probability(self):
        lm = LabelMatrix(np.zeros((1, 2)), np.zeros((1, 2), dtype=bool))
        post = e_step_id(IdParams(np.zeros(2), 0.0), unstack(np.zeros((2, 2)), np.zeros(2)),
                         np.ones((1, 2)), lm)
        assert post.p1[0] == 0.5

    def test_two_agreeing_labels(self):
        # sigma = 0.5 for both annotators: ratio exp(4)/(1+exp(4))
        lm = LabelMatrix(np.ones((1, 2)), np.ones((1, 2), dtype=bool))
        post = e_step_id(IdParams(np.zeros(1), 0.0), unstack(np.zeros((2, 1)), np.zeros(2)),
                         np.zeros((1, 1)), lm)
        assert post.p1[0] == pytest.approx(0.9820, abs=1e-4)

    def test_disagreeing_equal_noise_returns_prior(self):
        lm = LabelMatrix(np.array([[1, 0]]), np.ones((1, 2), dtype=bool))
        x = np.array([[0.7]])
        post = e_step_id(IdParams(np.array([1.3]), -0.2), unstack(np.zeros((2, 1)), np.zeros(2)), x, lm)
        assert post.p1[0] == pytest.approx(1 / (1 + np.exp(-(1.3 * 0.7 - 0.2))), abs=1e-14)

    @pytest.mark.parametrize("kind", ["ID", "LGP", "ML-ORIGINAL"])
    def test_matches_enumeration(self, kind):
        rng = np.random.default_rng({"ID": 1, "LGP": 2, "ML-ORIGINAL": 3}[kind])
        for _ in range(50):
            n = int(rng.integers(2, 11))
            X, lm, coef, b, W, g, anns = random_instance(rng, n=n, d=3, t=3, scale=1.0)
            if kind == "ML-ORIGINAL":
                W = np.zeros_like(W)
                anns = unstack(W, g)
            prior = build_graph_prior(X, eta=0.5) if kind == "LGP" else None
            pen = prior.penalty(coef) if prior else 0.0
            post_ref, logz = enumerate_joint(X, coef, b, W, g, lm, penalty=pen)
            params = LgpParams(coef, b) if kind == "LGP" else IdParams(coef, b)
            step = e_step_lgp if kind == "LGP" else e_step_id
            post = step(params, anns, X, lm)
            np.testing.assert_allclose(post.p1, post_ref, atol=1e-12, rtol=0)
            # enumeration includes unlabeled points, whose factors sum to one
            obs = observed_loglik(kind, params, anns, X, lm, prior=prior)
            assert obs == pytest.approx(logz, abs=1e-12 * max(1.0, abs(logz)))

    def test_posterior_helpers(self):
        p = Posterior(np.array([0.2, 0.5, 0.9]))
        np.testing.assert_allclose(p.delta, [-0.6, 0.0, 0.8])
        assert p.hard_labels().tolist() == [0, 1, 1]


class TestGradients:
    def test_id_objective_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            X, lm, coef, b, W, g, anns = random_instance(rng)
            post = Posterior(rng.random(X.shape[0]))
            d, t = X.shape[1], W.shape[0]

            def f(v):
                c, bb, Wv, gv = _unflat(v, d, t)
                return m_step_objective_id(IdParams(c, bb), unstack(Wv, gv), X, lm, post)[0]

            _, grad = m_step_objective_id(IdParams(coef, b), anns, X, lm, post)
            v0 = np.concatenate([coef, [b], W.ravel(), g])
            assert _rel_err(_flat(grad), finite_diff_gradient(f, v0, 1e-5)) < 1e-5

    def test_lgp_objective_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            X, lm, coef, b, W, g, anns = random_instance(rng)
            prior = build_graph_prior(X, eta=2.0)
            post = Posterior(rng.random(X.shape[0]))
            d, t = X.shape[1], W.shape[0]

            def f(v):
                c, bb, Wv, gv = _unflat(v, d, t)
                return m_step_objective_lgp(LgpParams(c, bb), unstack(Wv, gv), X, lm, prior, post)[0]

            _, grad = m_step_objective_lgp(LgpParams(coef, b), anns, X, lm, prior, post)
            v0 = np.concatenate([coef, [b], W.ravel(), g])
            assert _rel_err(_flat(grad), finite_diff_gradient(f, v0, 1e-5)) < 1e-5

    def test_classifier_gradient_vanishes_at_own_probability(self):
        rng = np.random.default_rng(0)
        X, lm, coef, b, W, g, anns = random_instance(rng)
        post = Posterior(1 / (1 + np.exp(-(X @ coef + b))))
        _, grad = m_step_objective_id(IdParams(coef, b), anns, X, lm, post)
        assert np.allclose(grad.coef, 0, atol=1e-12) and abs(grad.intercept) < 1e-12

    def test_eta_zero_lgp_equals_id(self):
        rng = np.random.default_rng(5)
        X, lm, coef, b, W, g, anns = random_instance(rng)
        prior = build_graph_prior(X, eta=0.0)
        post = Posterior(rng.random(X.shape[0]))
        v1, g1 = m_step_objective_id(IdParams(coef, b), anns, X, lm, post)
        v2, g2 = m_step_objective_lgp(LgpParams(coef, b), anns, X, lm, prior, post)
        assert v1 == v2
        np.testing.assert_array_equal(_flat(g1), _flat(g2))

    @pytest.mark.parametrize("kind", ["ID", "LGP"])
    def test_marginal_gradient_cross_checks(self, kind):
        rng = np.random.default_rng(21)
        for _ in range(10):
            X, lm, coef, b, W, g, anns = random_instance(rng)
            prior = build_graph_prior(X, eta=1.0) if kind == "LGP" else None
            params = LgpParams(coef, b) if kind == "LGP" else IdParams(coef, b)
            d, t = X.shape[1], W.shape[0]
            mg = _flat(marginal_gradient(kind, params, anns, X, lm, prior))

            def f(v):
                c, bb, Wv, gv = _unflat(v, d, t)
                p = LgpParams(c, bb) if kind == "LGP" else IdParams(c, bb)
                return observed_loglik(kind, p, unstack(Wv, gv), X, lm, prior)

            v0 = np.concatenate([coef, [b], W.ravel(), g])
            assert _rel_err(mg, finite_diff_gradient(f, v0, 1e-5)) < 1e-5

            # at the E-step posterior the expected objective is tangent to the
            # observed one, but only labeled rows enter the observed sum
            keep = np.flatnonzero(lm.labeled_points)
            Xl, Ll = X[keep], lm.subset(keep)
            post = e_step_id(IdParams(coef, b), anns, Xl, Ll)
            if kind == "LGP":
                _, eg = m_step_objective_lgp(params, anns, Xl, Ll, prior, post)
            else:
                _, eg = m_step_objective_id(params, anns, Xl, Ll, post)
            np.testing.assert_allclose(_flat(eg), mg, rtol=1e-9, atol=1e-9)


def _separable(seed=0, n=40):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    X[:, 0] += np.where(np.arange(n) < n // 2, -3, 3)
    z = (np.arange(n) >= n // 2).astype(int)
    return X, z


class TestFit:
    def test_single_perfect_annotator(self):
        X, z = _separable()
        lm = LabelMatrix(z[:, None], np.ones((len(z), 1), dtype=bool))
        m = fit("ID", X, lm)
        assert np.mean(predict(m, X) >= 0.5) == pytest.approx(np.mean(z))
        assert np.all((predict(m, X) >= 0.5) == z)
        assert m.diagnostics.converged

    def test_unanimous_annotators(self):
        X, z = _separable(1)
        vals = np.tile(z[:, None], (1, 3))
        m = fit("ID", X, LabelMatrix(vals, np.ones_like(vals, dtype=bool)))
        p = m.posterior.p1
        assert np.all(p[z == 1] > 0.99) and np.all(p[z == 0] < 0.01)

    def test_huge_epsilon_stops_after_one_iteration(self):
        X, z = _separable(2)
        lm = LabelMatrix(z[:, None], np.ones((len(z), 1), dtype=bool))
        m = fit("ID", X, lm, config=FitConfig(epsilon=1e6))
        assert m.diagnostics.iterations == 1 and m.diagnostics.converged

    def test_ml_original_keeps_w_zero(self, rng):
        X, lm, *_ = random_instance(rng, n=40)
        m = fit("ML-ORIGINAL", X, lm)
        assert all(np.all(a.w == 0) for a in m.annotators)
        assert m.kind is ModelKind.ML_ORIGINAL

    def test_history_non_decreasing(self, rng):
        X, lm, *_ = random_instance(rng, n=60, missing=0.5)
        for kind in ("ID", "LGP", "ML-ORIGINAL"):
            prior = build_graph_prior(X) if kind == "LGP" else None
            h = np.array(fit(kind, X, lm, prior=prior).diagnostics.objective_history)
            assert np.all(np.diff(h) >= -1e-8)

    def test_id_ignores_unlabeled_points(self, rng):
        X, lm, *_ = random_instance(rng, n=40, missing=0.2)
        extra = rng.normal(size=(15, X.shape[1]))
        X2 = np.vstack([X, extra])
        lm2 = LabelMatrix(np.vstack([lm.values, np.zeros((15, 3))]),
                          np.vstack([lm.observed, np.zeros((15, 3), dtype=bool)]))
        a, b = fit("ID", X, lm), fit("ID", X2, lm2)
        np.testing.assert_array_equal(a.classifier.coef, b.classifier.coef)
        assert a.diagnostics.final_objective == b.diagnostics.final_objective

    def test_lgp_requires_prior(self, rng):
        X, lm, *_ = random_instance(rng)
        with pytest.raises(ValueError):
            fit("LGP", X, lm)

    def test_no_labels(self):
        lm = LabelMatrix(np.zeros((4, 1)), np.zeros((4, 1), dtype=bool))
        with pytest.raises(FitError):
            fit("ID", np.zeros((4, 2)), lm)

    def test_soft_majority_vote(self):
        lm = LabelMatrix.from_triples([(0, 0, 1), (0, 1, 1), (1, 0, 0)], 3, 2)
        np.testing.assert_allclose(soft_majority_vote(lm), [0.75, 1 / 3, 0.5])


class TestPredict:
    def _model(self):
        X, z = _separable(3)
        lm = LabelMatrix(z[:, None], np.ones((len(z), 1), dtype=bool))
        return fit("ID", X, lm)

    def test_without_labels(self):
        m = self._model()
        x = np.array([0.3, -1.0])
        expected = 1 / (1 + np.exp(-(m.classifier.coef @ x + m.classifier.intercept)))
        assert predict(m, x) == pytest.approx(expected, abs=1e-15)

    def test_with_labels_matches_e_step(self):
        m = self._model()
        x = np.array([0.3, -1.0])
        lm = LabelMatrix.from_triples([(0, 0, 1)], 1, 1)
        ref = e_step_id(m.classifier, m.annotators, x[None], lm).p1[0]
        assert predict(m, x, {0: 1}) == ref

    def test_wrong_dimension(self):
        with pytest.raises(ValueError):
            predict(self._model(), np.zeros(3))

    def test_batch(self):
        m = self._model()
        X = np.zeros((4, 2))
        assert predict(m, X).shape == (4,)


class TestSerialization:
    @pytest.mark.parametrize("kind", ["ID", "LGP", "ML-ORIGINAL"])
    def test_round_trip_exact(self, rng, tmp_path, kind):
        X, lm, *_ = random_instance(rng, n=30)
        prior = build_graph_prior(X) if kind == "LGP" else None
        m = fit(kind, X, lm, prior=prior)
        save_model(m, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        assert back.kind == m.kind
        np.testing.assert_array_equal(back.classifier.coef, m.classifier.coef)
        assert back.classifier.intercept == m.classifier.intercept
        for a, b in zip(back.annotators, m.annotators):
            np.testing.assert_array_equal(a.w, b.w)
            assert a.gamma == b.gamma
        np.testing.assert_array_equal(predict(back, X), predict(m, X))
        assert model_to_dict(model_from_dict(json.loads(json.dumps(model_to_dict(m))))) == model_to_dict(m)

    def test_rejects_unknown_format(self):
        with pytest.raises(ValueError):
            model_from_dict({"format": "other", "version": 1})
