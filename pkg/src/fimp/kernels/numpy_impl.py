"""Pure-numpy implementations of the affinity / top-k hot kernels."""

from __future__ import annotations

import numpy as np


def affinity_batch(feats: np.ndarray) -> np.ndarray:
    """Negative squared L2 distance between all row pairs, decomposed.

    feats: contiguous float64 [B, N, C] -> scores [B, N, N] where
    scores[b, i, j] = 2 f_i . f_j - |f_i|^2 - |f_j|^2.
    """
    gram = feats @ feats.swapaxes(-1, -2)
    sq = np.einsum("bnc,bnc->bn", feats, feats)
    return 2.0 * gram - sq[:, :, None] - sq[:, None, :]


def topk_batch(scores: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k highest scores, self excluded.

    scores: float64 [B, N, N]; returns int64 [B, N, min(k, N-1)].  Ties are
    broken toward the lower index.  Scores must be finite.
    """
    b, n, _ = scores.shape
    kk = min(k, n - 1)
    s = scores.copy()
    idx = np.arange(n)
    s[:, idx, idx] = -np.inf
    # Stable sort on the negated scores keeps ascending index order for ties.
    order = np.argsort(-s, axis=-1, kind="stable")
    return order[:, :, :kk].astype(np.int64)
