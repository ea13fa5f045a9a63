"""Divergence family: frozen values, axioms, and finite-difference oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from redistill.divergence import (
    as_prob_vector,
    gamma_log,
    grad_divergence_wrt_logits,
    grad_divergence_wrt_probs,
    hessian_divergence_wrt_probs,
    kl_divergence,
    log_softmax,
    power_divergence,
    power_divergence_raw,
    scaled_temperature_divergence,
    softmax,
)

LAMBDA_GRID = [0.0, 1 / 3, 1 / 2, 2 / 3, 1.0, 3 / 2, 2.0]


def random_simplex(rng, k, floor=0.0):
    p = rng.dirichlet(np.ones(k))
    if floor:
        p = np.maximum(p, floor)
        p = p / p.sum()
    return p


# ---------------------------------------------------------------- gamma_log


def test_gamma_log_of_one_is_zero_for_every_order():
    for gamma in [-2.0, 0.0, 0.5, 1.0, 1.0 + 1e-9, 3.0]:
        assert gamma_log(1.0, gamma) == pytest.approx(0.0, abs=1e-15)


def test_gamma_log_order_one_is_natural_log():
    assert gamma_log(math.e, 1.0) == pytest.approx(1.0, abs=1e-12)
    x = np.array([0.1, 1.0, 7.3])
    np.testing.assert_allclose(gamma_log(x, 1.0), np.log(x), rtol=1e-14)


def test_gamma_log_order_zero_closed_form():
    # (2^1 - 1) / 1, evaluated independently from the branch expression
    assert gamma_log(2.0, 0.0) == pytest.approx(1.0, rel=1e-14)
    # order 3: (x^-2 - 1) / -2 at x=2 -> (0.25 - 1) / -2 = 0.375
    assert gamma_log(2.0, 3.0) == pytest.approx(0.375, rel=1e-14)


def test_gamma_log_continuous_at_one():
    for x in [0.25, 2.0, 9.0]:
        left = gamma_log(x, 1.0 - 5e-7)
        right = gamma_log(x, 1.0 + 5e-7)
        assert left == pytest.approx(math.log(x), rel=1e-9)
        assert right == pytest.approx(math.log(x), rel=1e-9)


def test_gamma_log_rejects_non_positive():
    with pytest.raises(ValueError):
        gamma_log(0.0, 0.5)
    with pytest.raises(ValueError):
        gamma_log(-1.0, 1.0)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_on_equal_logits():
    for k in (2, 5, 100):
        for tau in (0.5, 1.0, 8.0):
            np.testing.assert_allclose(softmax(np.zeros(k), tau), np.full(k, 1 / k), atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    v = rng.normal(size=6)
    np.testing.assert_allclose(softmax(v + 123.456), softmax(v), rtol=1e-12)


def test_softmax_two_to_one_ratio():
    out = softmax(np.array([math.log(1.0), math.log(2.0)]))
    np.testing.assert_allclose(out, [1 / 3, 2 / 3], rtol=1e-14)


def test_softmax_extreme_logits_stay_normalized():
    out = softmax(np.array([1000.0, -1000.0, 0.0]))
    assert np.isfinite(out).all()
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.exp(log_softmax(np.array([1000.0, -1000.0, 0.0]))).sum() == pytest.approx(1.0, abs=1e-12)


def test_prob_vector_validation():
    with pytest.raises(ValueError):
        as_prob_vector([0.5, 0.5000001])
    with pytest.raises(ValueError):
        as_prob_vector([1.2, -0.2])
    with pytest.raises(ValueError):
        as_prob_vector([1.0])


# ---------------------------------------------------------------- divergence values


def test_kl_frozen_values():
    p = np.array([1 / 3, 2 / 3])
    assert kl_divergence(p, np.array([1 / 2, 1 / 2])) == pytest.approx(
        (1 / 3) * math.log(2 / 3) + (2 / 3) * math.log(4 / 3), rel=1e-12)
    # reversed pair collapses to (1/3) ln 2
    assert kl_divergence(p, np.array([2 / 3, 1 / 3])) == pytest.approx(
        math.log(2) / 3, rel=1e-12)


def test_kl_one_hot_is_cross_entropy():
    q = np.array([0.2, 0.5, 0.3])
    p = np.array([0.0, 1.0, 0.0])
    assert kl_divergence(p, q) == pytest.approx(-math.log(0.5), rel=1e-12)


def test_kl_support_violation_raises():
    with pytest.raises(ValueError):
        kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


def test_power_divergence_pearson_case():
    p = np.array([1 / 3, 2 / 3])
    q = np.array([1 / 2, 1 / 2])
    value = power_divergence(p, q, 1.0)
    assert value == pytest.approx(1 / 18, rel=1e-13)
    # independent half-Pearson evaluation
    half_chi2 = 0.5 * np.sum((p - q) ** 2 / q)
    assert value == pytest.approx(half_chi2, rel=1e-12)


def test_power_divergence_matches_kl_at_zero_branch():
    p = np.array([1 / 3, 2 / 3])
    q = np.array([1 / 2, 1 / 2])
    assert power_divergence(p, q, 0.0) == pytest.approx(kl_divergence(p, q), abs=1e-15)


def test_power_divergence_reverse_kl_at_minus_one():
    rng = np.random.default_rng(4)
    p, q = random_simplex(rng, 5, 1e-3), random_simplex(rng, 5, 1e-3)
    assert power_divergence(p, q, -1.0) == pytest.approx(kl_divergence(q, p), abs=1e-15)


def test_power_divergence_dimension_mismatch():
    with pytest.raises(ValueError):
        power_divergence(np.array([0.5, 0.5]), np.array([0.3, 0.3, 0.4]), 1.0)


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 8), st.sampled_from([-0.5, 0.0, 1 / 3, 0.5, 2 / 3, 1.0, 1.5, 2.0]),
       st.integers(0, 10_000))
def test_power_divergence_nonnegative_and_identity(k, lam, seed):
    rng = np.random.default_rng(seed)
    p = random_simplex(rng, k, 1e-6)
    q = random_simplex(rng, k, 1e-6)
    assert power_divergence(p, q, lam) >= 0.0
    assert power_divergence(p, p, lam) <= 1e-12


def test_power_divergence_zero_iff_equal():
    rng = np.random.default_rng(5)
    for lam in LAMBDA_GRID:
        for _ in range(50):
            p = random_simplex(rng, 5, 1e-4)
            q = random_simplex(rng, 5, 1e-4)
            if np.max(np.abs(p - q)) >= 1e-9:
                assert power_divergence(p, q, lam) > 0.0


def test_kl_continuity_of_the_small_order_limit():
    # Inside the branch tolerance the KL limit is exact; just outside it the
    # closed form approaches KL at first order in the order parameter.
    rng = np.random.default_rng(6)
    for _ in range(50):
        p = random_simplex(rng, 6, 1e-3)
        q = random_simplex(rng, 6, 1e-3)
        kl = kl_divergence(p, q)
        for lam in (0.0, 1e-7, -1e-7):
            assert power_divergence(p, q, lam) == pytest.approx(kl, abs=1e-15)
        curvature = float(np.sum(p * (np.log(p) - np.log(q)) ** 2))
        for lam in (1e-4, -1e-4):
            bound = abs(lam) * (0.5 * curvature + kl) + 1e-12
            assert abs(power_divergence(p, q, lam) - kl) <= bound


def test_pearson_identity_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(200):
        k = int(rng.integers(2, 12))
        p = random_simplex(rng, k, 1e-4)
        q = random_simplex(rng, k, 1e-4)
        half_chi2 = 0.5 * np.sum((p - q) ** 2 / q)
        assert power_divergence(p, q, 1.0) == pytest.approx(half_chi2, rel=1e-12)


def test_zero_mass_classes_contribute_nothing():
    p = np.array([0.0, 0.4, 0.6])
    q = np.array([0.2, 0.4, 0.4])
    expected = 0.4 * ((0.4 / 0.4) ** 0.5 - 1) + 0.6 * ((0.6 / 0.4) ** 0.5 - 1)
    expected /= 0.5 * 1.5
    assert power_divergence(p, q, 0.5) == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------- gradients


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_grad_wrt_probs_frozen_values():
    p = np.array([1 / 3, 2 / 3])
    q = np.array([1 / 2, 1 / 2])
    np.testing.assert_allclose(grad_divergence_wrt_probs(p, q, 0.0), [-2 / 3, -4 / 3], rtol=1e-13)
    # equal distributions: every component is -1/(1+lam)
    for lam in (0.0, 2 / 3, 2.0):
        np.testing.assert_allclose(grad_divergence_wrt_probs(q, q, lam),
                                   np.full(2, -1 / (1 + lam)), rtol=1e-13)


def test_grad_wrt_probs_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(250):
        k = int(rng.integers(2, 8))
        lam = float(rng.choice(LAMBDA_GRID))
        p = random_simplex(rng, k, 0.02)
        q = random_simplex(rng, k, 0.02)
        grad = grad_divergence_wrt_probs(p, q, lam)
        fd = fd_gradient(lambda qv: power_divergence_raw(p, qv, lam), q)
        # atol floor: central differences of a function of size |f| carry
        # roundoff noise around eps * |f| / h ~ 1e-7 regardless of the
        # gradient's own magnitude.
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-7)


def test_hessian_frozen_value_and_equality_case():
    p = np.array([1 / 3, 2 / 3])
    q = np.array([1 / 2, 1 / 2])
    np.testing.assert_allclose(hessian_divergence_wrt_probs(p, q, 1.0), [8 / 9, 32 / 9], rtol=1e-13)
    np.testing.assert_allclose(hessian_divergence_wrt_probs(q, q, 2.0), 1.0 / q, rtol=1e-13)


def test_hessian_matches_second_differences():
    rng = np.random.default_rng(9)
    for _ in range(150):
        k = int(rng.integers(2, 7))
        lam = float(rng.choice([0.0, 1 / 3, 2 / 3, 1.0, 2.0]))
        p = random_simplex(rng, k, 0.05)
        q = random_simplex(rng, k, 0.05)
        diag = hessian_divergence_wrt_probs(p, q, lam)
        h = 1e-4
        for j in range(k):
            qp, qm = q.copy(), q.copy()
            qp[j] += h
            qm[j] -= h
            second = (power_divergence_raw(p, qp, lam) - 2 * power_divergence_raw(p, q, lam)
                      + power_divergence_raw(p, qm, lam)) / h ** 2
            assert second == pytest.approx(diag[j], rel=1e-4, abs=1e-6)


def test_hessian_matches_gradient_differences():
    rng = np.random.default_rng(10)

    def raw_grad_component(p, q, lam, j):
        # coordinate gradient written out directly; valid off the simplex
        return -((p[j] / q[j]) ** (lam + 1.0)) / (1.0 + lam)

    for _ in range(100):
        k = int(rng.integers(2, 7))
        lam = float(rng.choice(LAMBDA_GRID))
        p = random_simplex(rng, k, 0.02)
        q = random_simplex(rng, k, 0.02)
        diag = hessian_divergence_wrt_probs(p, q, lam)
        h = 1e-6
        for j in range(k):
            qp, qm = q.copy(), q.copy()
            qp[j] += h
            qm[j] -= h
            fd = (raw_grad_component(p, qp, lam, j) - raw_grad_component(p, qm, lam, j)) / (2 * h)
            assert fd == pytest.approx(diag[j], rel=1e-6, abs=1e-7)


def test_logit_gradient_stationary_at_matching_distributions():
    rng = np.random.default_rng(11)
    v = rng.normal(size=6)
    for tau in (1.0, 4.0):
        p = softmax(v, tau)
        grad = grad_divergence_wrt_logits(p, v, 2 / 3, tau)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_logit_gradient_kl_reduction():
    rng = np.random.default_rng(12)
    for tau in (1.0, 4.0):
        u, v = rng.normal(size=5), rng.normal(size=5)
        p = softmax(u, tau)
        q = softmax(v, tau)
        np.testing.assert_allclose(grad_divergence_wrt_logits(p, v, 0.0, tau),
                                   (q - p) / tau, rtol=1e-10, atol=1e-14)


def test_logit_gradient_matches_finite_differences_and_sums_to_zero():
    rng = np.random.default_rng(13)
    for _ in range(200):
        k = int(rng.integers(2, 8))
        lam = float(rng.choice(LAMBDA_GRID))
        tau = float(rng.choice([1.0, 4.0]))
        u, v = rng.normal(0, 2, size=k), rng.normal(0, 2, size=k)
        p = softmax(u, tau)
        grad = grad_divergence_wrt_logits(p, v, lam, tau)
        assert abs(grad.sum()) < 1e-10
        fd = fd_gradient(lambda vv: power_divergence(p, softmax(vv, tau), lam), v)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


def test_logit_gradient_large_temperature_asymptote():
    # The exact gradient approaches q_j (v_j - u_j) / tau^2 as tau grows;
    # the relative error shrinks monotonically along the temperature ladder.
    rng = np.random.default_rng(14)
    for _ in range(10):
        k = int(rng.integers(3, 9))
        u = rng.uniform(-1, 1, size=k)
        v = rng.uniform(-1, 1, size=k)
        u -= u.mean()
        v -= v.mean()
        errors = []
        for tau in (10.0, 20.0, 50.0, 100.0):
            p = softmax(u, tau)
            q = softmax(v, tau)
            grad = grad_divergence_wrt_logits(p, v, 2 / 3, tau)
            approx = q * (v - u) / tau ** 2
            errors.append(np.linalg.norm(grad - approx) / np.linalg.norm(grad))
        assert errors[2] < 0.05
        assert all(a > b for a, b in zip(errors, errors[1:]))


# ---------------------------------------------------------------- temperature scaling


def test_scaled_divergence_zero_for_identical_logits():
    v = np.array([0.3, -1.2, 2.0])
    for tau in (1.0, 4.0, 16.0):
        assert scaled_temperature_divergence(v, v, 2 / 3, tau) == 0.0


def test_scaled_divergence_tau_one_is_plain():
    rng = np.random.default_rng(15)
    u, v = rng.normal(size=4), rng.normal(size=4)
    plain = power_divergence(softmax(u), softmax(v), 2 / 3)
    assert scaled_temperature_divergence(u, v, 2 / 3, 1.0) == pytest.approx(plain, rel=1e-14)


def test_scaled_divergence_keeps_gradient_magnitude_stable():
    rng = np.random.default_rng(16)
    for _ in range(8):
        k = int(rng.integers(3, 8))
        u = rng.uniform(-1, 1, size=k)
        v = rng.uniform(-1, 1, size=k)
        u -= u.mean()
        v -= v.mean()
        norms = []
        for tau in (4.0, 8.0, 16.0):
            p = softmax(u, tau)
            grad = tau ** 2 * grad_divergence_wrt_logits(p, v, 2 / 3, tau)
            norms.append(np.linalg.norm(grad))
        assert max(norms) <= 2.0 * min(norms)
