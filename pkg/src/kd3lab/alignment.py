"""Instance-weighted feature alignment between student and teacher."""

from __future__ import annotations

import numpy as np

from .numerics import sigmoid


def alignment_weight(p_s, p_t):
    """``1 - sigmoid(||p_s - p_t||_1)`` per row; a constant w.r.t. all parameters."""
    a = np.asarray(p_s, dtype=np.float64)
    b = np.asarray(p_t, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"prediction shapes differ: {a.shape} vs {b.shape}")
    l1 = np.abs(a - b).sum(axis=-1)
    # sigmoid(-l1) == 1 - sigmoid(l1) without the cancellation
    if a.ndim == 1:
        return sigmoid(-float(l1))
    return sigmoid(-l1)


def wfa_loss(h_s: np.ndarray, h_t: np.ndarray, weights: np.ndarray):
    """Weighted feature alignment.

    loss = mean_i w_i * mean_k (h_s[i,k] - h_t[i,k])^2, with gradient returned
    for ``h_s`` only.  An empty batch gives ``(0.0, empty grad)``.
    """
    h_s = np.asarray(h_s, dtype=np.float64)
    h_t = np.asarray(h_t, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if h_s.shape != h_t.shape:
        raise ValueError(f"feature shapes differ: {h_s.shape} vs {h_t.shape}")
    n = h_s.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(h_s)
    if w.shape != (n,):
        raise ValueError(f"need one weight per instance ({n}), got shape {w.shape}")
    d = h_s.shape[1]
    diff = h_s - h_t
    per = np.mean(diff * diff, axis=1)
    loss = float(np.dot(w, per) / n)
    grad = (2.0 / (d * n)) * w[:, None] * diff
    return loss, grad
