import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crowdlgp.annotators import SIGMA_MIN, AnnotatorParams, label_loglik, sigma, sigma_grad_terms
from crowdlgp.optim import finite_diff_gradient


def test_sigma_at_zero():
    assert sigma(AnnotatorParams(np.zeros(2), 0.0), np.array([3.0, -1.0])) == 0.5


def test_sigma_orthogonal_input():
    assert sigma(AnnotatorParams(np.array([1.0, 0.0]), 0.0), np.array([0.0, 5.0])) == 0.5


def test_sigma_large_offset():
    # 1 / (1 + e^-10)
    assert sigma(AnnotatorParams(np.zeros(1), 10.0), np.zeros(1)) == pytest.approx(0.9999546, abs=1e-7)


def test_sigma_floor():
    assert sigma(AnnotatorParams(np.zeros(1), -50.0), np.zeros(1)) == SIGMA_MIN


def test_loglik_values():
    assert label_loglik(1, 1, 1.0) == pytest.approx(-0.918939, abs=1e-6)
    assert label_loglik(0, 1, 0.5) == pytest.approx(-2.225791, abs=1e-6)
    assert label_loglik(0, 1, 0.3) - label_loglik(1, 1, 0.3) == pytest.approx(-1 / (2 * 0.09))


def test_grad_terms_agreeing_label():
    p = AnnotatorParams(np.array([0.3, -0.2]), 0.4)
    x = np.array([1.0, 2.0])
    s = sigma(p, x)
    dw, dg = sigma_grad_terms(p, x, 1, 1)
    assert dg == pytest.approx(-(1 - s))
    np.testing.assert_allclose(dw, dg * x)


def test_grad_terms_hand_value():
    x = np.array([2.0, -1.0])
    dw, dg = sigma_grad_terms(AnnotatorParams(np.zeros(2), 0.0), x, 0, 1)
    assert dg == pytest.approx(1.5)
    np.testing.assert_allclose(dw, 1.5 * x)


def test_grad_terms_zero_when_clamped():
    dw, dg = sigma_grad_terms(AnnotatorParams(np.zeros(2), -20.0), np.ones(2), 1, 0)
    assert dg == 0.0 and np.all(dw == 0)


def test_grad_terms_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(50):
        d = 3
        w, g, x = rng.normal(size=d), rng.normal(), rng.normal(size=d)
        y, z = rng.integers(0, 2, size=2)

        def f(v):
            return label_loglik(y, z, sigma(AnnotatorParams(v[:d], v[d]), x))

        dw, dg = sigma_grad_terms(AnnotatorParams(w, g), x, y, z)
        analytic = np.r_[dw, dg]
        fd = finite_diff_gradient(f, np.r_[w, g], 1e-5)
        assert np.linalg.norm(analytic - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-3)


@settings(max_examples=60, deadline=None)
@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-5, 5))
def test_sigma_monotone_and_bounded(g1, g2, u):
    x = np.array([1.0])
    lo, hi = sorted((g1, g2))
    s_lo = sigma(AnnotatorParams(np.array([u]), lo), x)
    s_hi = sigma(AnnotatorParams(np.array([u]), hi), x)
    assert SIGMA_MIN <= s_lo <= s_hi <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1), st.floats(SIGMA_MIN, 1.0))
def test_loglik_maximized_at_matching_truth(y, s):
    assert label_loglik(y, y, s) > label_loglik(y, 1 - y, s)
