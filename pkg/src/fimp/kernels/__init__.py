"""Hot kernels for affinity extraction and top-k neighbor selection.

The compiled extension is preferred when present; the numpy implementation
is the fallback.  Set FIMP_PURE_PYTHON=1 to force the fallback.  Both
backends share the contract documented in `numpy_impl`.
"""

from __future__ import annotations

import os

import numpy as np

from fimp.kernels import numpy_impl

if os.environ.get("FIMP_PURE_PYTHON"):
    _impl = numpy_impl
    BACKEND = "numpy"
else:
    try:
        from fimp.kernels import _ckernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = numpy_impl
        BACKEND = "numpy"


def _as_batch(feats: np.ndarray) -> tuple[np.ndarray, tuple]:
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    lead = feats.shape[:-2]
    return feats.reshape((-1,) + feats.shape[-2:]), lead


def affinity_matrix(feats: np.ndarray) -> np.ndarray:
    """Pairwise affinity (negative squared L2 distance) between rows.

    feats: [..., N, C] -> float64 scores [..., N, N], computed by the
    decomposition 2 f_i . f_j - |f_i|^2 - |f_j|^2 with 64-bit accumulation.
    """
    batch, lead = _as_batch(feats)
    out = np.asarray(_impl.affinity_batch(batch))
    return out.reshape(lead + out.shape[-2:])


def affinity_pair(fa: np.ndarray, fb: np.ndarray) -> float:
    """Affinity of a single feature pair (decomposed form)."""
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    return float(2.0 * fa @ fb - fa @ fa - fb @ fb)


def topk_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of each row's k highest-affinity neighbors, self excluded.

    scores: finite [..., N, N] -> int64 [..., N, min(k, N-1)], ties broken
    toward the lower index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    lead = scores.shape[:-2]
    batch = scores.reshape((-1,) + scores.shape[-2:])
    out = np.asarray(_impl.topk_batch(batch, k))
    return out.reshape(lead + out.shape[-2:])


def affinity_matrix_naive(feats: np.ndarray) -> np.ndarray:
    """Direct -|f_i - f_j|^2 pairwise loop; reference/benchmark path."""
    feats = np.asarray(feats, dtype=np.float64)
    lead = feats.shape[:-2]
    batch = feats.reshape((-1,) + feats.shape[-2:])
    b, n, _ = batch.shape
    out = np.empty((b, n, n))
    for bi in range(b):
        for i in range(n):
            for j in range(n):
                d = batch[bi, i] - batch[bi, j]
                out[bi, i, j] = -(d @ d)
    return out.reshape(lead + (n, n))
