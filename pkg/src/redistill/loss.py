"""Distillation objectives built on the power-divergence family.

The full robust objective combines a hard cross-entropy term on the
ground-truth label with two temperature-softened divergence terms on the
decoupled teacher distribution: a binary target-vs-rest term weighted by
``alpha`` and a renormalized non-target term weighted by ``beta``.  At
``lambda_ = 0`` both divergence terms reduce to KL and the objective is the
decoupled-KL baseline; dropping the divergence terms leaves vanilla
cross-entropy.

Everything is computed in log space so that confident logits never
underflow, and gradients are exact (chain rule through the decoupling and
the softened softmax), not autodiff or finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .divergence import (
    LAMBDA_BRANCH_TOL,
    as_logit_vector,
    as_prob_vector,
)

__all__ = [
    "DEGENERATE_MASS_TOL",
    "RedistillConfig",
    "DecoupledDistributions",
    "decouple",
    "redistill_loss",
    "redistill_loss_batch",
    "kd_loss",
    "kd_loss_batch",
    "cross_entropy_loss",
    "cross_entropy_loss_batch",
    "decoupled_kl_reference",
]

# Below this non-target teacher mass the renormalized conditional carries no
# information; the non-target term and its gradient are defined as zero.
DEGENERATE_MASS_TOL = 1e-9


@dataclass(frozen=True)
class RedistillConfig:
    """Hyper-parameters of the robust distillation objective.

    ``lambda_`` is the divergence order (0 recovers decoupled KL), ``alpha``
    and ``beta`` weight the target and non-target terms, ``tau`` softens the
    teacher-matching terms, and ``hard_weight`` scales the ground-truth
    cross-entropy term (which always runs at temperature 1).
    """

    lambda_: float = 2.0 / 3.0
    alpha: float = 1.0
    beta: float = 8.0
    tau: float = 4.0
    hard_weight: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lambda_):
            raise ValueError(f"lambda_ must be finite, got {self.lambda_}")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("alpha", "beta", "hard_weight"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be >= 0, got {value}")

    def with_lambda(self, lambda_: float) -> "RedistillConfig":
        return replace(self, lambda_=float(lambda_))

    def to_dict(self) -> dict:
        return {
            "lambda": self.lambda_,
            "alpha": self.alpha,
            "beta": self.beta,
            "tau": self.tau,
            "hard_weight": self.hard_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RedistillConfig":
        known = {"lambda", "alpha", "beta", "tau", "hard_weight"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        kwargs = {("lambda_" if k == "lambda" else k): float(v) for k, v in d.items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class DecoupledDistributions:
    """Target-vs-rest binary mass and the renormalized non-target conditional."""

    target_binary: np.ndarray
    nontarget_conditional: np.ndarray


def decouple(probs, target_class: int) -> DecoupledDistributions:
    """Split a distribution into (target mass, rest) and the non-target conditional.

    The non-target conditional keeps ascending class order with the target
    class removed.  Raises when the non-target mass is degenerate (below
    1e-9), since the conditional is then undefined.
    """
    p = as_prob_vector(probs)
    k = p.size
    if not (0 <= target_class < k):
        raise ValueError(f"target_class {target_class} out of range for K={k}")
    others = np.delete(p, target_class)
    rest = float(others.sum())
    if rest < DEGENERATE_MASS_TOL:
        raise ValueError(
            f"non-target mass {rest} is degenerate (< {DEGENERATE_MASS_TOL}); "
            "the non-target conditional is undefined"
        )
    target_binary = np.array([p[target_class], rest])
    return DecoupledDistributions(target_binary, others / rest)


def _log_softmax_rows(m: np.ndarray, tau: float) -> np.ndarray:
    z = m / tau
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _logsumexp_excluding(lm: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp of ``lm`` with the label column masked out."""
    masked = lm.copy()
    masked[np.arange(lm.shape[0]), labels] = -np.inf
    top = masked.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(masked - top).sum(axis=1, keepdims=True)))[:, 0]


def _hard_term_batch(v: np.ndarray, labels: np.ndarray):
    """Cross-entropy to the one-hot label at temperature 1, with its gradient."""
    ls = _log_softmax_rows(v, 1.0)
    rows = np.arange(v.shape[0])
    loss = -ls[rows, labels]
    grad = np.exp(ls)
    grad[rows, labels] -= 1.0
    return loss, grad


def _pair_divergence(pw, a, lambda_: float):
    """Power divergence from weights ``pw`` and log-ratios ``a = log(p) - log(q)``.

    Row-wise over the last axis; entries with zero weight contribute zero.
    """
    if abs(lambda_) < LAMBDA_BRANCH_TOL:
        total = (pw * a).sum(axis=-1)
    elif abs(lambda_ + 1.0) < LAMBDA_BRANCH_TOL:
        qw = pw * np.exp(-a)
        total = (qw * -a).sum(axis=-1)
    else:
        total = (pw * np.expm1(lambda_ * a)).sum(axis=-1) / (lambda_ * (lambda_ + 1.0))
    return np.maximum(total, 0.0)


def _pair_grad(a, lambda_: float):
    """d/dq of the pair divergence, from the log-ratios ``a``."""
    if abs(lambda_ + 1.0) < LAMBDA_BRANCH_TOL:
        return 1.0 - a
    return -np.exp((1.0 + lambda_) * a) / (1.0 + lambda_)


def redistill_loss_batch(student_logits, teacher_logits, labels, config: RedistillConfig):
    """Vectorized objective over rows of logits; returns (loss, grad) per row.

    Bitwise-identical per row to the single-sample `redistill_loss`; this is
    the path the training loop uses.  Overflow on extreme ratios is allowed
    to propagate as inf/nan for the caller's divergence guard to catch.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _redistill_batch_inner(student_logits, teacher_logits, labels, config)


def _redistill_batch_inner(student_logits, teacher_logits, labels, config: RedistillConfig):
    v = np.asarray(student_logits, dtype=np.float64)
    u = np.asarray(teacher_logits, dtype=np.float64)
    y = np.asarray(labels)
    n, k = v.shape
    rows = np.arange(n)
    lam, tau = config.lambda_, config.tau

    hard_loss, hard_grad = _hard_term_batch(v, y)
    loss = config.hard_weight * hard_loss
    grad = config.hard_weight * hard_grad
    if config.alpha == 0.0 and config.beta == 0.0:
        return loss, grad

    lp = _log_softmax_rows(u, tau)
    lq = _log_softmax_rows(v, tau)
    q = np.exp(lq)
    lp_t, lq_t = lp[rows, y], lq[rows, y]
    lp_rest = _logsumexp_excluding(lp, y)
    lq_rest = _logsumexp_excluding(lq, y)
    p_rest = np.exp(lp_rest)
    tau_sq = tau * tau
    # dL/dq, accumulated over both decoupled terms before the softmax chain.
    dl_dq = np.zeros_like(q)

    if config.alpha != 0.0:
        ab = np.stack([lp_t - lq_t, lp_rest - lq_rest], axis=1)
        pb = np.stack([np.exp(lp_t), p_rest], axis=1)
        d_target = _pair_divergence(pb, ab, lam)
        gb = _pair_grad(ab, lam)
        loss = loss + config.alpha * tau_sq * d_target
        contrib = np.repeat(gb[:, 1:2], k, axis=1)
        contrib[rows, y] = gb[:, 0]
        dl_dq += config.alpha * tau_sq * contrib

    if config.beta != 0.0:
        # Teacher mass off the label below tolerance: term and gradient are zero.
        live = p_rest >= DEGENERATE_MASS_TOL
        lp_rest_safe = np.where(live, lp_rest, 0.0)
        # Renormalized non-target conditionals, still in log space.
        ln_p = lp - lp_rest_safe[:, None]
        ln_q = lq - lq_rest[:, None]
        an = ln_p - ln_q
        q_nt = np.exp(ln_q)
        keep = np.ones((n, k), dtype=bool)
        keep[rows, y] = False
        d_nontarget = _pair_divergence(np.where(keep, np.exp(ln_p), 0.0),
                                       np.where(keep, an, 0.0), lam)
        gn = np.where(keep, _pair_grad(an, lam), 0.0)
        inner = (gn * np.where(keep, q_nt, 0.0)).sum(axis=1)
        s_rest = np.exp(lq_rest)
        contrib = np.where(keep & live[:, None], (gn - inner[:, None]) / s_rest[:, None], 0.0)
        loss = loss + config.beta * tau_sq * np.where(live, d_nontarget, 0.0)
        dl_dq += config.beta * tau_sq * contrib

    soft_grad = q * (dl_dq - (dl_dq * q).sum(axis=1, keepdims=True)) / tau
    return loss, grad + soft_grad


def redistill_loss(student_logits, teacher_logits, label: int, config: RedistillConfig):
    """Robust distillation objective and its exact gradient in the student logits.

    loss = hard_weight * CE(label, softmax(v))
         + alpha * tau^2 * D_lambda(teacher target split, student target split)
         + beta  * tau^2 * D_lambda(teacher non-target cond., student non-target cond.)
    """
    v = as_logit_vector(student_logits)
    u = as_logit_vector(teacher_logits)
    if v.shape != u.shape:
        raise ValueError(f"logit dimension mismatch: {v.shape} vs {u.shape}")
    if not (0 <= label < v.size):
        raise ValueError(f"label {label} out of range for K={v.size}")
    loss, grad = redistill_loss_batch(v[None, :], u[None, :], np.array([label]), config)
    return float(loss[0]), grad[0]


def kd_loss_batch(student_logits, teacher_logits, labels, c1: float, c2: float, tau: float):
    """Vectorized plain-KD objective: c1 * hard CE + c2 * tau^2 * KL(teacher, student)."""
    v = np.asarray(student_logits, dtype=np.float64)
    u = np.asarray(teacher_logits, dtype=np.float64)
    y = np.asarray(labels)
    hard_loss, hard_grad = _hard_term_batch(v, y)
    if c1 == 1.0:
        loss, grad = hard_loss, hard_grad
    else:
        loss, grad = c1 * hard_loss, c1 * hard_grad
    if c2 != 0.0:
        lp = _log_softmax_rows(u, tau)
        lq = _log_softmax_rows(v, tau)
        p = np.exp(lp)
        soft = np.maximum((p * (lp - lq)).sum(axis=1), 0.0)
        loss = loss + c2 * (tau * tau) * soft
        grad = grad + c2 * tau * (np.exp(lq) - p)
    return loss, grad


def kd_loss(student_logits, teacher_logits, label: int, c1: float, c2: float, tau: float):
    """Classic distillation loss (non-decoupled) and its exact logit gradient."""
    v = as_logit_vector(student_logits)
    u = as_logit_vector(teacher_logits)
    if v.shape != u.shape:
        raise ValueError(f"logit dimension mismatch: {v.shape} vs {u.shape}")
    if not (0 <= label < v.size):
        raise ValueError(f"label {label} out of range for K={v.size}")
    if not (np.isfinite(tau) and tau > 0):
        raise ValueError(f"tau must be positive, got {tau}")
    loss, grad = kd_loss_batch(v[None, :], u[None, :], np.array([label]), c1, c2, tau)
    return float(loss[0]), grad[0]


def cross_entropy_loss_batch(student_logits, labels):
    """Vectorized plain cross-entropy to one-hot labels, with gradients."""
    v = np.asarray(student_logits, dtype=np.float64)
    return _hard_term_batch(v, np.asarray(labels))


def cross_entropy_loss(student_logits, label: int):
    """Plain cross-entropy to the one-hot label, with gradient."""
    v = as_logit_vector(student_logits)
    if not (0 <= label < v.size):
        raise ValueError(f"label {label} out of range for K={v.size}")
    loss, grad = _hard_term_batch(v[None, :], np.array([label]))
    return float(loss[0]), grad[0]


def decoupled_kl_reference(student_logits, teacher_logits, label: int,
                           alpha: float, beta: float, tau: float,
                           hard_weight: float = 1.0) -> float:
    """Independently coded decoupled-KL objective value (the lambda_=0 baseline).

    Written directly from the KL definitions on explicitly renormalized
    probabilities, sharing no code with the power-divergence path; used to
    cross-check the lambda_ -> 0 limit of `redistill_loss`.
    """
    v = as_logit_vector(student_logits)
    u = as_logit_vector(teacher_logits)
    ev = np.exp(v - v.max())
    q1 = ev / ev.sum()
    hard = -float(np.log(q1[label]))

    ep = np.exp(u / tau - (u / tau).max())
    p = ep / ep.sum()
    eq = np.exp(v / tau - (v / tau).max())
    q = eq / eq.sum()
    pb = np.array([p[label], 1.0 - p[label]])
    qb = np.array([q[label], 1.0 - q[label]])
    kl_target = float(np.sum(pb * np.log(pb / qb)))
    p_nt = np.delete(p, label) / (1.0 - p[label])
    q_nt = np.delete(q, label) / (1.0 - q[label])
    kl_nontarget = float(np.sum(p_nt * np.log(p_nt / q_nt)))
    return hard_weight * hard + alpha * tau * tau * kl_target + beta * tau * tau * kl_nontarget
