"""Differentiable building blocks: attention, GRU cell, MLPs, dropout.

All functions accept batched inputs: any number of leading batch axes is
allowed in front of the documented core shape.
"""

from __future__ import annotations

import math

import numpy as np

from fimp.diffcore import tensor as T
from fimp.diffcore.params import AttentionParams, GruParams, MlpParams
from fimp.diffcore.tensor import Tensor
from fimp.errors import DimensionError, NonFiniteError


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[*B, n, C] -> [*B, h, n, C/h]"""
    *b, n, c = x.shape
    x = x.reshape(tuple(b) + (n, heads, c // heads))
    nd = x.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return x.transpose(perm)


def _merge_heads(x: Tensor) -> Tensor:
    """[*B, h, n, d] -> [*B, n, h*d]"""
    *b, h, n, d = x.shape
    nd = x.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return x.transpose(perm).reshape(tuple(b) + (n, h * d))


def mha(x: Tensor, y: Tensor, p: AttentionParams,
        mask: np.ndarray | None = None,
        dropout_p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Scaled dot-product multi-head attention.

    x: queries [*B, n_q, C]; y: keys/values [*B, n_kv, C]; mask: optional
    bool array broadcastable to [*B, n_q, n_kv], True = key allowed.  Every
    query row must keep at least one allowed key.
    """
    C = p.feature_dim
    if x.shape[-1] != C or y.shape[-1] != C:
        raise DimensionError(
            f"attention feature dim mismatch: {x.shape[-1]}/{y.shape[-1]} vs {C}")
    h = p.heads
    q = _split_heads(x @ p.w_q, h)                    # [*B, h, n_q, d]
    k = _split_heads(y @ p.w_k, h)
    v = _split_heads(y @ p.w_v, h)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(C / h))
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)  # head axis
    attn = T.softmax(scores, mask=mask, axis=-1)
    out = _merge_heads(attn @ v) @ p.w_o
    if dropout_p > 0.0 and rng is not None:
        out = dropout(out, dropout_p, rng)
    return out


def mhsa(x: Tensor, p: AttentionParams, mask: np.ndarray | None = None,
         dropout_p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Self-attention: mha with two identical inputs."""
    return mha(x, x, p, mask=mask, dropout_p=dropout_p, rng=rng)


def gru_cell(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU step: h' = (1-z)*n + z*h_prev.

    x, h_prev: [*B, C].  Fused into a single tape node: the model unrolls
    this cell over every future timestep, so per-node overhead dominates a
    composite formulation.
    """
    if x.shape != h_prev.shape:
        raise DimensionError(f"gru_cell shapes differ: {x.shape} vs {h_prev.shape}")
    if not (np.isfinite(x.data).all() and np.isfinite(h_prev.data).all()):
        raise NonFiniteError("gru_cell received non-finite input")
    shape = x.shape
    c = shape[-1]
    x2 = x.data.reshape(-1, c)
    h2 = h_prev.data.reshape(-1, c)
    w_z, u_z, b_z = p.w_z, p.u_z, p.b_z
    w_r, u_r, b_r = p.w_r, p.u_r, p.b_r
    w_n, u_n, b_n = p.w_n, p.u_n, p.b_n
    z = 1.0 / (1.0 + np.exp(-(x2 @ w_z.data + h2 @ u_z.data + b_z.data)))
    r = 1.0 / (1.0 + np.exp(-(x2 @ w_r.data + h2 @ u_r.data + b_r.data)))
    rh = r * h2
    n = np.tanh(x2 @ w_n.data + rh @ u_n.data + b_n.data)
    out_data = ((1.0 - z) * n + z * h2).reshape(shape)

    parents = (x, h_prev, *p.blocks())
    out = T._make(out_data, parents)
    if out.requires_grad:
        def bw(g):
            g2 = g.reshape(-1, c)
            dn = g2 * (1.0 - z)
            dz = g2 * (h2 - n)
            dh = g2 * z
            dnin = dn * (1.0 - n * n)
            dzin = dz * (z * (1.0 - z))
            drh = dnin @ u_n.data.T
            drin = (drh * h2) * (r * (1.0 - r))
            dh += drh * r
            if x.requires_grad:
                dx = dzin @ w_z.data.T + drin @ w_r.data.T + dnin @ w_n.data.T
                x._accum_own(dx.reshape(shape))
            if h_prev.requires_grad:
                dh = dh + dzin @ u_z.data.T + drin @ u_r.data.T
                h_prev._accum_own(dh.reshape(shape))
            for gate, w, u, b in ((dzin, w_z, u_z, b_z), (drin, w_r, u_r, b_r),
                                  (dnin, w_n, u_n, b_n)):
                if w.requires_grad:
                    w._accum_own(x2.T @ gate)
                if u.requires_grad:
                    u._accum_own((rh if u is u_n else h2).T @ gate)
                if b.requires_grad:
                    b._accum_own(gate.sum(axis=0))
        out._bw = bw
    return out


def mlp_block(x: Tensor, p: MlpParams, activation=T.relu) -> Tensor:
    """Affine -> activation per hidden layer; final layer affine only."""
    n = len(p.layers)
    for i, (w, b) in enumerate(p.layers):
        if x.shape[-1] != w.data.shape[0]:
            raise DimensionError(
                f"mlp layer {i} expects {w.data.shape[0]} features, got {x.shape[-1]}")
        x = T.affine(x, w, b)
        if i < n - 1:
            x = activation(x)
    return x


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * keep


def elu_plus_one(x: Tensor, eps: float = 0.001) -> Tensor:
    """ELU(x) + 1 + eps: strictly positive scale activation."""
    return T.elu(x) + (1.0 + eps)
