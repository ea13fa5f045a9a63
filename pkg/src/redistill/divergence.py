"""Power-divergence family between discrete distributions.

The divergence of order ``lambda_`` interpolates between classical
divergences: ``lambda_=0`` is the Kullback-Leibler divergence,
``lambda_=1`` is half the Pearson chi-squared distance, and
``lambda_=-1`` is the reverse KL.  Alongside the values, this module
provides the exact analytic gradients with respect to the second
(model) distribution and with respect to the pre-softmax logits,
including the temperature-scaled variant used for distillation.

All functions are pure and operate on 1-d float64 arrays.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "LAMBDA_BRANCH_TOL",
    "GAMMA_BRANCH_TOL",
    "PROB_FLOOR",
    "as_prob_vector",
    "as_logit_vector",
    "gamma_log",
    "softmax",
    "log_softmax",
    "kl_divergence",
    "power_divergence",
    "power_divergence_raw",
    "grad_divergence_wrt_probs",
    "hessian_divergence_wrt_probs",
    "grad_divergence_wrt_logits",
    "scaled_temperature_divergence",
]

# |lambda_| below this uses the KL limit; |lambda_ + 1| below it the reverse KL.
LAMBDA_BRANCH_TOL = 1e-6
# |gamma - 1| below this selects the natural-log branch of gamma_log.
GAMMA_BRANCH_TOL = 1e-6
# Probabilities are floored here before ratio computation (never before
# validation), so that gradients stay finite when the model mass underflows.
PROB_FLOOR = 1e-12

_SUM_ATOL = 1e-9


def as_prob_vector(p) -> np.ndarray:
    """Validate and return ``p`` as a point on the probability simplex.

    Requires at least two classes, non-negative entries, and a total mass
    of 1 within 1e-9.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError(f"probability vector must be 1-d with K >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("probability vector contains non-finite entries")
    if np.any(p < 0):
        raise ValueError(f"probability vector has negative entries: min={p.min()}")
    total = float(p.sum())
    if abs(total - 1.0) > _SUM_ATOL:
        raise ValueError(f"probability vector sums to {total}, expected 1 within {_SUM_ATOL}")
    return p


def as_logit_vector(v) -> np.ndarray:
    """Validate and return ``v`` as a vector of raw scores (finite, K >= 2)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError(f"logit vector must be 1-d with K >= 2, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("logit vector contains non-finite entries")
    return v


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError(f"temperature must be a positive finite real, got {tau}")
    return tau


def _check_order(lambda_: float) -> float:
    lambda_ = float(lambda_)
    if not np.isfinite(lambda_):
        raise ValueError(f"divergence order must be finite, got {lambda_}")
    return lambda_


def _check_pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = as_prob_vector(p)
    q = as_prob_vector(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    if np.any((q <= 0) & (p > 0)):
        raise ValueError("support violation: q has zero mass where p is positive")
    return p, q


def gamma_log(x, gamma: float):
    """Relaxed logarithm of order ``gamma`` (the Box-Cox transform of ``1 - gamma``).

    Returns ``log(x)`` for ``gamma`` within 1e-6 of 1 and
    ``(x**(1 - gamma) - 1) / (1 - gamma)`` otherwise.  Continuous in
    ``gamma`` at 1; undefined (raises) for ``x <= 0``.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = float(gamma)
    if np.any(x <= 0):
        raise ValueError("gamma_log is undefined for x <= 0")
    if abs(gamma - 1.0) < GAMMA_BRANCH_TOL:
        out = np.log(x)
    else:
        # expm1 keeps precision when (1 - gamma) * log(x) is tiny.
        out = np.expm1((1.0 - gamma) * np.log(x)) / (1.0 - gamma)
    return out if out.ndim else float(out)


def softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature-softened softmax, stabilized by max subtraction."""
    return np.exp(log_softmax(logits, tau))


def log_softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Log of the temperature-softened softmax; always finite for finite logits."""
    v = as_logit_vector(logits) / _check_tau(tau)
    v = v - v.max()
    return v - np.log(np.exp(v).sum())


def kl_divergence(p, q) -> float:
    """Kullback-Leibler divergence ``sum_k p_k log(p_k / q_k)``.

    Terms with ``p_k = 0`` contribute exactly zero regardless of ``q_k``.
    """
    p, q = _check_pair(p, q)
    mask = p > 0
    qc = np.maximum(q[mask], PROB_FLOOR)
    total = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(qc))))
    # Non-negative by Gibbs' inequality; drop the roundoff dust at p ~= q.
    return max(total, 0.0)


def power_divergence(p, q, lambda_: float) -> float:
    """Power divergence of order ``lambda_`` between ``p`` and ``q``.

    Evaluates ``(1 / (lambda_ (lambda_ + 1))) sum_k p_k [(p_k/q_k)**lambda_ - 1]``
    with the singular orders resolved by their continuous limits:
    KL(p, q) near ``lambda_ = 0`` and KL(q, p) near ``lambda_ = -1``.
    Non-negative, zero iff ``p = q``.
    """
    lambda_ = _check_order(lambda_)
    if abs(lambda_) < LAMBDA_BRANCH_TOL:
        return kl_divergence(p, q)
    if abs(lambda_ + 1.0) < LAMBDA_BRANCH_TOL:
        return kl_divergence(q, p)
    p, q = _check_pair(p, q)
    mask = p > 0
    pm = p[mask]
    qc = np.maximum(q[mask], PROB_FLOOR)
    log_ratio = np.log(pm) - np.log(qc)
    # expm1 keeps the sum accurate when lambda_ * log_ratio is small.
    total = np.sum(pm * np.expm1(lambda_ * log_ratio))
    value = total / (lambda_ * (lambda_ + 1.0))
    # The family is non-negative; clamp the roundoff dust at p ~= q.
    return max(float(value), 0.0)


def power_divergence_raw(p, q, lambda_: float) -> float:
    """The divergence formula on raw positive weight vectors, no simplex checks.

    The closed form is well defined slightly off the simplex, which is what
    finite-difference verification of the coordinate gradients needs: a
    perturbed ``q`` no longer sums to one, so the validating entry point
    would reject it.
    """
    lambda_ = float(lambda_)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    pm = p[mask]
    qc = np.maximum(q[mask], PROB_FLOOR)
    log_ratio = np.log(pm) - np.log(qc)
    if abs(lambda_) < LAMBDA_BRANCH_TOL:
        return float(np.sum(pm * log_ratio))
    if abs(lambda_ + 1.0) < LAMBDA_BRANCH_TOL:
        qm = np.maximum(q, PROB_FLOOR)
        return float(np.sum(qm * (np.log(qm) - np.log(np.maximum(p, PROB_FLOOR)))))
    total = np.sum(pm * np.expm1(lambda_ * log_ratio))
    return float(total / (lambda_ * (lambda_ + 1.0)))


def grad_divergence_wrt_probs(p, q, lambda_: float) -> np.ndarray:
    """Gradient of ``power_divergence(p, q, lambda_)`` in the model coordinates ``q``.

    Component ``j`` is ``-(1 / (1 + lambda_)) (p_j / q_j)**(lambda_ + 1)``;
    near ``lambda_ = -1`` the reverse-KL limit ``log(q_j / p_j) + 1`` is used.
    """
    lambda_ = _check_order(lambda_)
    p, q = _check_pair(p, q)
    qc = np.maximum(q, PROB_FLOOR)
    if abs(lambda_ + 1.0) < LAMBDA_BRANCH_TOL:
        pc = np.maximum(p, PROB_FLOOR)
        return np.log(qc) - np.log(pc) + 1.0
    grad = np.zeros_like(q)
    mask = p > 0
    ratio = p[mask] / qc[mask]
    grad[mask] = -np.power(ratio, lambda_ + 1.0) / (1.0 + lambda_)
    return grad


def hessian_divergence_wrt_probs(p, q, lambda_: float) -> np.ndarray:
    """Diagonal of the Hessian of the divergence in ``q``; off-diagonals vanish.

    Entry ``j`` is ``(p_j / q_j)**(1 + lambda_) / q_j``, which also covers the
    reverse-KL order ``lambda_ = -1`` (where it reduces to ``1 / q_j``).
    """
    lambda_ = _check_order(lambda_)
    p, q = _check_pair(p, q)
    qc = np.maximum(q, PROB_FLOOR)
    diag = np.zeros_like(q)
    if abs(lambda_ + 1.0) < LAMBDA_BRANCH_TOL:
        return 1.0 / qc
    mask = p > 0
    diag[mask] = np.power(p[mask] / qc[mask], 1.0 + lambda_) / qc[mask]
    return diag


def grad_divergence_wrt_logits(p, student_logits, lambda_: float, tau: float = 1.0) -> np.ndarray:
    """Gradient of ``power_divergence(p, softmax(v, tau), lambda_)`` in the logits ``v``.

    ``p`` is the (already temperature-softened) target distribution.  Component
    ``j`` equals ``(1/tau) (q_j / (1 + lambda_)) [sum_i p_i r_i**lambda_ - r_j**(1+lambda_)]``
    with ``r = p / q``.  The components sum to zero: the gradient lies in the
    tangent space of the softmax map.
    """
    lambda_ = _check_order(lambda_)
    p = as_prob_vector(p)
    v = as_logit_vector(student_logits)
    if p.shape != v.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {v.shape}")
    tau = _check_tau(tau)
    lq = log_softmax(v, tau)
    q = np.exp(lq)
    if abs(lambda_ + 1.0) < LAMBDA_BRANCH_TOL:
        # Reverse-KL limit, chained through the softmax Jacobian.
        pc = np.maximum(p, PROB_FLOOR)
        g = lq - np.log(pc) + 1.0
        return q * (g - np.dot(g, q)) / tau
    mask = p > 0
    log_ratio = np.where(mask, np.log(np.maximum(p, PROB_FLOOR)) - lq, 0.0)
    powers = np.where(mask, np.exp((1.0 + lambda_) * log_ratio), 0.0)
    mean_power = float(np.dot(q, powers))  # equals sum_i p_i r_i**lambda_
    return q * (mean_power - powers) / ((1.0 + lambda_) * tau)


def scaled_temperature_divergence(teacher_logits, student_logits, lambda_: float,
                                  tau: float) -> float:
    """``tau**2``-scaled divergence between temperature-softened softmax outputs.

    The square factor compensates the ``1/tau**2`` shrinkage of softened-target
    gradients, keeping the soft term comparable to an unsoftened hard term.
    """
    u = as_logit_vector(teacher_logits)
    v = as_logit_vector(student_logits)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    tau = _check_tau(tau)
    return tau * tau * power_divergence(softmax(u, tau), softmax(v, tau), lambda_)
