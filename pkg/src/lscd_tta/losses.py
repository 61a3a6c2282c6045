"""Unsupervised test-time losses with analytic logit gradients.

Each loss takes probabilities ``y`` (one vector or an ``(n, C)`` batch) that
have already been clamped away from the simplex boundary, and returns a
:class:`LossEval` whose ``value`` holds the per-sample loss and whose
``grad_logits`` is the gradient of that per-sample loss with respect to the
logits that produced ``y`` through softmax.

The gradient is formed in two steps: the partial derivative with respect to
the probabilities, then the softmax Jacobian (:func:`softmax_backward`).
Clamped entries are treated as pass-through in that second step, which keeps
the saturated regime informative instead of silently zeroing the gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prob import DEFAULT_FLOOR, argmax_tiebreak, clamp_simplex, softmax, softmax_backward

BASELINE_KINDS = ("entropy", "hard_pl_ce", "confidence")


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the composite objective plus the density smoothing."""

    alpha: float = 0.25
    beta: float = 1.0
    tau: float = 1.5
    epsilon: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "beta", "tau"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite non-negative number, got {v!r}")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon!r}")


@dataclass
class LossEval:
    value: float | np.ndarray
    grad_logits: np.ndarray

    def __add__(self, other: "LossEval") -> "LossEval":
        return LossEval(self.value + other.value, self.grad_logits + other.grad_logits)

    def __rmul__(self, k: float) -> "LossEval":
        return LossEval(k * self.value, k * self.grad_logits)


def _prep(y) -> tuple[np.ndarray, bool]:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim not in (1, 2):
        raise ValueError(f"expected a vector or (n, C) batch, got shape {y.shape}")
    if y.shape[-1] < 2:
        raise ValueError(f"need C >= 2 classes, got C={y.shape[-1]}")
    return np.atleast_2d(y), y.ndim == 1


def _finish(y, value, grad_probs, squeeze) -> LossEval:
    grad = softmax_backward(y, grad_probs)
    if squeeze:
        return LossEval(float(value[0]), grad[0])
    return LossEval(value, grad)


def weak_density(y, epsilon: float = 0.01) -> np.ndarray:
    """Per-class density: ``epsilon`` on the predicted class, ``1 - epsilon/(C-1)`` elsewhere."""
    if not 0.0 < epsilon < 0.5:
        raise ValueError(f"epsilon must lie in (0, 0.5), got {epsilon!r}")
    y2, squeeze = _prep(y)
    C = y2.shape[-1]
    d = np.full(y2.shape, 1.0 - epsilon / (C - 1))
    d[np.arange(len(y2)), argmax_tiebreak(y2)] = epsilon
    return d[0] if squeeze else d


def wcse_loss(y, epsilon: float = 0.01, detach_pseudo_labels: bool = False) -> LossEval:
    """Weak-confidence softmax entropy, ``-sum exp(d) * sqrt(y) * log(y)``.

    The density ``d`` depends on ``y`` only through the argmax, so it is
    held constant when differentiating.
    """
    y, squeeze = _prep(y)
    lam = np.exp(weak_density(y, epsilon))
    root = np.sqrt(y)
    logy = np.log(y)
    value = -np.sum(lam * root * logy, axis=-1)
    if detach_pseudo_labels:
        grad_y = -lam * root / y
    else:
        grad_y = -lam * (logy + 2.0) / (2.0 * root)
    return _finish(y, value, grad_y, squeeze)


def bcse_loss(y, epsilon: float = 0.01, detach_pseudo_labels: bool = False) -> LossEval:
    """Balanced-categories softmax entropy, ``-sum exp(b) * y * log(y)``.

    ``b = y*(1-d) + (1-y)*d`` blends the prediction with the weak density.
    """
    y, squeeze = _prep(y)
    d = weak_density(y, epsilon)
    b = d + y * (1.0 - 2.0 * d)
    lam = np.exp(b)
    logy = np.log(y)
    value = -np.sum(lam * y * logy, axis=-1)
    if detach_pseudo_labels:
        grad_y = -lam
    else:
        # d/dy_c [exp(b_c) y_c log y_c] with db_c/dy_c = 1 - 2 d_c
        grad_y = -lam * ((1.0 - 2.0 * d) * y * logy + logy + 1.0)
    return _finish(y, value, grad_y, squeeze)


def lsd_loss(y) -> LossEval:
    """Low-saturation loss ``sum_c y_c * log(sum_{i != c} y_i)``.

    The off-class mass is taken as ``1 - y_c``. Its logit gradient tends to a
    constant rather than zero as one class takes all the mass.
    """
    y, squeeze = _prep(y)
    rest = 1.0 - y
    logrest = np.log(rest)
    value = np.sum(y * logrest, axis=-1)
    grad_y = logrest - y / rest
    return _finish(y, value, grad_y, squeeze)


def lscd_loss(
    z,
    weights: LossWeights = LossWeights(),
    floor: float = DEFAULT_FLOOR,
    detach_pseudo_labels: bool = False,
) -> LossEval:
    """Composite objective ``alpha*wcse + beta*bcse + tau*lsd`` evaluated from logits."""
    y = clamp_simplex(softmax(z), floor)
    eps = weights.epsilon
    total = LossEval(np.zeros(y.shape[:-1]) if y.ndim == 2 else 0.0, np.zeros_like(y))
    # zero-weight terms are skipped so that degenerate weights reproduce a
    # single component bit for bit
    if weights.alpha:
        total = total + weights.alpha * wcse_loss(y, eps, detach_pseudo_labels)
    if weights.beta:
        total = total + weights.beta * bcse_loss(y, eps, detach_pseudo_labels)
    if weights.tau:
        total = total + weights.tau * lsd_loss(y)
    return total


def baseline_loss(kind: str, y) -> LossEval:
    """Reference objectives: Tent entropy, hard pseudo-label CE, negative confidence."""
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline loss {kind!r}; expected one of {BASELINE_KINDS}")
    y, squeeze = _prep(y)
    rows = np.arange(len(y))
    if kind == "entropy":
        logy = np.log(y)
        value = -np.sum(y * logy, axis=-1)
        grad_y = -(logy + 1.0)
    elif kind == "hard_pl_ce":
        top = argmax_tiebreak(y)
        value = -np.log(y[rows, top])
        grad_y = np.zeros_like(y)
        grad_y[rows, top] = -1.0 / y[rows, top]
    else:
        top = argmax_tiebreak(y)
        value = -y[rows, top]
        grad_y = np.zeros_like(y)
        grad_y[rows, top] = -1.0
    return _finish(y, value, grad_y, squeeze)
