"""Numerically stable probability primitives.

Every function accepts a single vector of length ``C`` or a batch of shape
``(n, C)``; the class axis is always the last one.
"""
from __future__ import annotations

import numpy as np

DEFAULT_FLOOR = 1e-7


def _as_float(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def logsumexp(z, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    z = _as_float(z)
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def softmax(z) -> np.ndarray:
    """Softmax along the last axis, stabilised by subtracting the max logit."""
    z = _as_float(z)
    if z.ndim == 0 or z.shape[-1] < 2:
        raise ValueError(f"need at least 2 classes, got logits of shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax received non-finite logits")
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def argmax_tiebreak(y) -> np.ndarray | int:
    """Index of the largest entry; exact ties resolve to the lowest index."""
    # np.argmax already returns the first occurrence of the maximum.
    idx = np.argmax(_as_float(y), axis=-1)
    return int(idx) if np.ndim(idx) == 0 else idx


def clamp_simplex(y, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Raise every entry to at least ``floor`` and renormalise to sum 1.

    Entries already above the floor keep their order, and a vector that was
    clamped once is left (numerically) unchanged by a second call.
    """
    y = _as_float(y)
    C = y.shape[-1]
    if not 0.0 < floor < 1.0 / C:
        raise ValueError(f"floor must lie in (0, 1/C) = (0, {1.0 / C:g}), got {floor!r}")
    squeeze = y.ndim == 1
    y = np.atleast_2d(y)
    pinned = y < floor
    while True:
        n_pinned = pinned.sum(axis=-1, keepdims=True)
        free_mass = np.sum(np.where(pinned, 0.0, y), axis=-1, keepdims=True)
        out = np.where(pinned, floor, y * (1.0 - floor * n_pinned) / free_mass)
        newly = ~pinned & (out < floor)
        if not newly.any():
            break
        pinned |= newly
    return out[0] if squeeze else out


def softmax_backward(y, grad_probs) -> np.ndarray:
    """Chain a gradient w.r.t. probabilities back through softmax."""
    y = _as_float(y)
    g = _as_float(grad_probs)
    return y * (g - np.sum(g * y, axis=-1, keepdims=True))
