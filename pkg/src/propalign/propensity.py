"""Score-space geometry: log-ratio transform and cross-modality cost matrices.

Matching never uses raw features; distances are Euclidean between log-ratio
transformed score vectors, which is a metric over a bijection of the scores.
"""

from __future__ import annotations

import numpy as np

DEFAULT_CLAMP = 1e-6


def _scores_of(table) -> np.ndarray:
    return table.scores if hasattr(table, "scores") else np.asarray(table, dtype=np.float64)


def logit_transform(table, clamp: float = DEFAULT_CLAMP) -> np.ndarray:
    """Map simplex rows (T+1 probs) to R^T via log(p_t / p_0), t = 1..T.

    Probabilities are clamped to [clamp, 1-clamp] before the ratio, which
    keeps the map finite and bijective when classifiers saturate.
    """
    if not 0 < clamp < 0.5:
        raise ValueError("clamp must lie in (0, 0.5)")
    p = np.clip(_scores_of(table), clamp, 1.0 - clamp)
    return np.log(p[:, 1:]) - np.log(p[:, :1])


def inverse_logit_transform(logits: np.ndarray) -> np.ndarray:
    """Softmax of [0, logits]: recovers the (clamped, renormalized) scores."""
    logits = np.asarray(logits, dtype=np.float64)
    full = np.concatenate([np.zeros((logits.shape[0], 1)), logits], axis=1)
    full = full - full.max(axis=1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=1, keepdims=True)


def cost_matrix(logits1: np.ndarray, logits2: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances between logit rows, (n1, n2)."""
    a = np.asarray(logits1, dtype=np.float64)
    b = np.asarray(logits2, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"logit dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))
