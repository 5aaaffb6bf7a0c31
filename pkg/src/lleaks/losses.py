"""Probability transforms and training objectives.

Softmax and its temperature-generalized form, cross-entropy, KL divergence,
the combined distillation loss with its analytic logit gradient, and the
high-temperature closed-form KL gradient used as a verification oracle.

Vector functions accept 1-D logit/probability vectors; batched variants
operate row-wise over (n, num_classes) arrays and average over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12  # clamp before log so saturated distributions stay finite


@dataclass(frozen=True)
class DistillConfig:
    """Weights for the combined distillation objective.

    loss = alpha * T^2 * KL(teacher at T || student at T)
         + beta * cross_entropy(student at T=1, label)
    """

    temperature: float = 4.0
    alpha: float = 0.9
    beta: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if not self.alpha + self.beta > 0:
            raise ValueError("alpha + beta must be positive")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise exp-normalization with max-subtraction for overflow safety."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.isfinite(z).all():
        raise ValueError("softmax requires finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mi_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax: p_i = exp(z_i/T) / sum_j exp(z_j/T).

    T=1 reproduces softmax bit-for-bit; T -> 0+ sharpens toward one-hot argmax;
    T -> inf flattens toward the uniform distribution. Argmax is preserved for
    every positive T.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return softmax(np.asarray(logits, dtype=np.float64) / temperature)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-log probs[label], with the probability clamped below at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def mean_cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Batch mean of per-row cross-entropy."""
    p = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= p.shape[1]:
        raise ValueError("label out of range")
    picked = p[np.arange(p.shape[0]), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum_i p_i log(p_i / q_i) with q clamped at 1e-12 and 0*log(0/q) := 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution length mismatch: {p.shape} vs {q.shape}")
    qc = np.maximum(q, PROB_FLOOR)
    terms = np.where(p > 0, p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(qc)), 0.0)
    return float(terms.sum())


def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def distill_loss(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    label: int | None,
    cfg: DistillConfig,
) -> tuple[float, np.ndarray]:
    """Combined distillation loss and its gradient w.r.t. the student logits.

    The KL term compares teacher and student at temperature T and is scaled by
    alpha*T^2 so its gradient magnitude stays comparable to the label term as T
    grows. The cross-entropy term evaluates the student at temperature 1. The
    teacher logits are treated as constants. With label=None the cross-entropy
    term is dropped.
    """
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"logit length mismatch: {t.shape} vs {s.shape}")
    T = cfg.temperature
    p_t = mi_softmax(t, T)
    q_s = mi_softmax(s, T)
    loss = cfg.alpha * T * T * kl_divergence(p_t, q_s)
    grad = cfg.alpha * T * (q_s - p_t)
    if label is not None:
        probs = softmax(s)
        loss += cfg.beta * cross_entropy(probs, label)
        delta = probs.copy()
        delta[label] -= 1.0
        grad = grad + cfg.beta * delta
    return float(loss), grad


def distill_loss_batch(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    labels: np.ndarray | None,
    cfg: DistillConfig,
) -> tuple[float, np.ndarray]:
    """Batch-mean distillation loss; gradient rows carry the 1/n factor."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"logit shape mismatch: {t.shape} vs {s.shape}")
    n = s.shape[0]
    T = cfg.temperature
    p_t = mi_softmax(t, T)
    q_s = mi_softmax(s, T)
    qc = np.maximum(q_s, PROB_FLOOR)
    kl_rows = np.where(
        p_t > 0, p_t * (np.log(np.maximum(p_t, PROB_FLOOR)) - np.log(qc)), 0.0
    ).sum(axis=1)
    loss = cfg.alpha * T * T * kl_rows.mean()
    grad = (cfg.alpha * T / n) * (q_s - p_t)
    if labels is not None:
        probs = softmax(s)
        loss += cfg.beta * mean_cross_entropy(probs, labels)
        delta = probs - onehot(labels, s.shape[1])
        grad = grad + (cfg.beta / n) * delta
    return float(loss), grad


def kl_logit_grad(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float) -> np.ndarray:
    """Exact gradient of KL(teacher at T || student at T) w.r.t. the student logits."""
    q = mi_softmax(student_logits, temperature)
    p = mi_softmax(teacher_logits, temperature)
    return (q - p) / temperature


def kl_logit_grad_closed_form(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    temperature: float,
    n: int,
) -> np.ndarray:
    """High-temperature closed form (z_i - v_i) / (n * T^2) of the KL logit gradient.

    Valid only under its stated hypothesis: both logit vectors are zero-mean.
    Serves as the verification oracle for the exact gradient at large T.
    """
    z = np.asarray(student_logits, dtype=np.float64)
    v = np.asarray(teacher_logits, dtype=np.float64)
    if z.shape != v.shape or z.shape != (n,):
        raise ValueError(f"expected two length-{n} logit vectors, got {z.shape} and {v.shape}")
    if abs(z.sum()) > 1e-9 or abs(v.sum()) > 1e-9:
        raise ValueError("closed form requires zero-mean logits")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return (z - v) / (n * temperature * temperature)
