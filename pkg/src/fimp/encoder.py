"""Motion encoder and history interaction.

Per agent: motion deltas are embedded per step, a learnable token is
appended, and a pre-norm temporal attention stack produces the history
feature H (the updated token).  Lane and neighbor cross-attention then
yield the lane-aware feature and the interaction-aware feature.

All stages run batched over agents; cross-attention stages additionally
broadcast over any leading (mode, zone) axes, which lets the future decoder
reuse them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fimp.config import TrainConfig
from fimp.diffcore import nn
from fimp.diffcore import tensor as T
from fimp.diffcore.params import (
    AttentionParams,
    LayerNormParams,
    MlpParams,
    ParamStore,
    make_attention,
    make_layer_norm,
    make_mlp,
    token_init,
)
from fimp.diffcore.tensor import Tensor
from fimp.errors import DimensionError
from fimp.scene import LANE_FEATURE_DIM, T_HISTORY


@dataclass
class SelfBlockParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    ffn: MlpParams


@dataclass
class CrossBlockParams:
    ln_q: LayerNormParams
    ln_kv: LayerNormParams
    attn: AttentionParams
    ln_f: LayerNormParams
    ffn: MlpParams


def make_self_block(store: ParamStore, prefix: str, dim: int, heads: int,
                    rng) -> SelfBlockParams:
    return SelfBlockParams(
        ln1=make_layer_norm(store, f"{prefix}.ln1", dim),
        attn=make_attention(store, f"{prefix}.attn", dim, heads, rng),
        ln2=make_layer_norm(store, f"{prefix}.ln2", dim),
        ffn=make_mlp(store, f"{prefix}.ffn", (dim, 4 * dim, dim), rng),
    )


def make_cross_block(store: ParamStore, prefix: str, dim: int, heads: int,
                     rng) -> CrossBlockParams:
    return CrossBlockParams(
        ln_q=make_layer_norm(store, f"{prefix}.ln_q", dim),
        ln_kv=make_layer_norm(store, f"{prefix}.ln_kv", dim),
        attn=make_attention(store, f"{prefix}.attn", dim, heads, rng),
        ln_f=make_layer_norm(store, f"{prefix}.ln_f", dim),
        ffn=make_mlp(store, f"{prefix}.ffn", (dim, 4 * dim, dim), rng),
    )


def _ffn(x: Tensor, p: MlpParams, dropout_p: float, rng) -> Tensor:
    h = T.relu(T.affine(x, *p.layers[0]))
    if dropout_p > 0.0 and rng is not None:
        h = nn.dropout(h, dropout_p, rng)
    return T.affine(h, *p.layers[1])


def apply_self_block(x: Tensor, p: SelfBlockParams, pos,
                     key_mask: np.ndarray | None = None,
                     dropout_p: float = 0.0, rng=None) -> Tensor:
    """Pre-norm residual self-attention + feed-forward.

    `pos` (positional embeddings, broadcastable to x) is added to the block
    input; `key_mask` [*B, n] marks valid keys.
    """
    xi = x + pos if pos is not None else x
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, :]
    att = nn.mhsa(T.layer_norm(xi, p.ln1.gain, p.ln1.bias), p.attn, mask=mask,
                  dropout_p=dropout_p, rng=rng)
    h = att + xi
    return _ffn(T.layer_norm(h, p.ln2.gain, p.ln2.bias), p.ffn, dropout_p, rng) + h


def apply_cross_block(q: Tensor, kv: Tensor, p: CrossBlockParams,
                      kv_mask: np.ndarray | None = None,
                      dropout_p: float = 0.0, rng=None) -> Tensor:
    """kv_mask must be broadcastable to [*B, n_q, n_kv] (True = allowed)."""
    mask = None if kv_mask is None else np.asarray(kv_mask, dtype=bool)
    att = nn.mha(T.layer_norm(q, p.ln_q.gain, p.ln_q.bias),
                 T.layer_norm(kv, p.ln_kv.gain, p.ln_kv.bias),
                 p.attn, mask=mask, dropout_p=dropout_p, rng=rng)
    h = att + q
    return _ffn(T.layer_norm(h, p.ln_f.gain, p.ln_f.bias), p.ffn, dropout_p, rng) + h


def apply_cross_stack(blocks, q: Tensor, kv: Tensor,
                      kv_mask: np.ndarray | None,
                      bypass: np.ndarray | None = None,
                      dropout_p: float = 0.0, rng=None) -> Tensor:
    """Stacked cross-attention; rows flagged in `bypass` keep their input.

    q [*B, 1, C]; kv [*B2, K, C] broadcastable against q's batch; bypass is
    a float 0/1 array broadcastable to q (1 = keep original input).
    """
    out = q
    for p in blocks:
        out = apply_cross_block(out, kv, p, kv_mask, dropout_p, rng)
    if bypass is not None and bypass.any():
        keep = bypass.astype(out.data.dtype)
        out = out * (1.0 - keep) + q * keep
    return out


@dataclass
class EncoderParams:
    motion_mlp: MlpParams
    token: Tensor
    pos: Tensor
    temporal: list
    lane_mlp: MlpParams
    lane_blocks: list
    nbr_feat_mlp: MlpParams
    nbr_pose_mlp: MlpParams
    agent_blocks: list


def build_encoder(store: ParamStore, cfg: TrainConfig, rng) -> EncoderParams:
    c = cfg.feature_dim
    h = cfg.heads
    hid = cfg.motion_hidden
    return EncoderParams(
        motion_mlp=make_mlp(store, "encoder.motion_mlp", (2, hid, c), rng),
        token=store.add("encoder.token", token_init((c,), rng)),
        pos=store.add("encoder.pos", token_init((T_HISTORY + 1, c), rng)),
        temporal=[make_self_block(store, f"encoder.temporal{i}", c, h, rng)
                  for i in range(cfg.temporal_layers)],
        lane_mlp=make_mlp(store, "encoder.lane_mlp", (LANE_FEATURE_DIM, hid, c), rng),
        lane_blocks=[make_cross_block(store, f"encoder.lane{i}", c, h, rng)
                     for i in range(cfg.lane_layers)],
        nbr_feat_mlp=make_mlp(store, "encoder.nbr_feat", (c, c, c), rng),
        nbr_pose_mlp=make_mlp(store, "encoder.nbr_pose", (4, hid, c), rng),
        agent_blocks=[make_cross_block(store, f"encoder.agent{i}", c, h, rng)
                      for i in range(cfg.agent_layers)],
    )


def encode_motion(ep: EncoderParams, motion: np.ndarray, pad: np.ndarray,
                  dropout_p: float = 0.0, rng=None) -> Tensor:
    """History feature H [N, C] from agent-frame motion deltas.

    motion [N, T, 2]; pad [N, T] True where a delta is padding.  Padded
    steps are masked out of every attention; the appended token is always a
    valid key and its final row is the output.
    """
    n, t, _ = motion.shape
    if pad.all(axis=1).any():
        raise DimensionError("encode_motion: an agent has every step padded")
    x = nn.mlp_block(Tensor(motion), ep.motion_mlp)          # [N, T, C]
    c = ep.token.shape[0]
    tok = ep.token.reshape((1, 1, c)) + np.zeros((n, 1, c), dtype=x.data.dtype)
    seq = T.concat([x, tok], axis=1)                          # [N, T+1, C]
    key_mask = np.concatenate([~pad, np.ones((n, 1), dtype=bool)], axis=1)
    for block in ep.temporal:
        seq = apply_self_block(seq, block, ep.pos, key_mask, dropout_p, rng)
    return seq[:, -1, :]


def embed_lane(ep: EncoderParams, segments: np.ndarray) -> Tensor:
    """Per-segment lane embeddings: MLP over [start, end-start, attributes]."""
    return nn.mlp_block(Tensor(segments), ep.lane_mlp)


def fuse_lanes(ep: EncoderParams, h: Tensor, lane_emb: Tensor,
               lane_mask: np.ndarray, dropout_p: float = 0.0, rng=None) -> Tensor:
    """Lane-aware agent feature via cross-attention over sampled segments.

    h [N, C]; lane_emb [N, S, C]; lane_mask [N, S].  Agents with no sampled
    lane keep H exactly.
    """
    n, c = h.shape
    if lane_emb.shape[1] == 0:
        return h
    has_lane = lane_mask.any(axis=1)
    kv_mask = lane_mask.copy()
    kv_mask[~has_lane, 0] = True  # dummy key; result discarded by bypass
    q = h.reshape((n, 1, c))
    out = apply_cross_stack(ep.lane_blocks, q, lane_emb, kv_mask[:, None, :],
                            bypass=(~has_lane)[:, None, None],
                            dropout_p=dropout_p, rng=rng)
    return out.reshape((n, c))


def project_features(feat_mlp: MlpParams, pose_mlp: MlpParams,
                     feats: Tensor, pose_feats) -> Tensor:
    """MLP(feature) + MLP([p, cos(theta), sin(theta)]) projection."""
    pose = pose_feats if isinstance(pose_feats, Tensor) else Tensor(pose_feats)
    return nn.mlp_block(feats, feat_mlp) + nn.mlp_block(pose, pose_mlp)


def fuse_agents(ep: EncoderParams, h: Tensor, nbr_idx: np.ndarray,
                nbr_mask: np.ndarray, nbr_pose: np.ndarray,
                dropout_p: float = 0.0, rng=None) -> Tensor:
    """Interaction-aware history feature via cross-attention over neighbors
    projected into each agent's frame.

    h [N, C]; nbr_idx/nbr_mask [N, K]; nbr_pose [N, K, 4].  Isolated agents
    keep their input feature.
    """
    n, c = h.shape
    if nbr_idx.shape[1] == 0:
        return h
    feats = T.gather(h, nbr_idx)                              # [N, K, C]
    keys = project_features(ep.nbr_feat_mlp, ep.nbr_pose_mlp, feats, nbr_pose)
    has_nbr = nbr_mask.any(axis=1)
    kv_mask = nbr_mask.copy()
    kv_mask[~has_nbr, 0] = True
    q = h.reshape((n, 1, c))
    out = apply_cross_stack(ep.agent_blocks, q, keys, kv_mask[:, None, :],
                            bypass=(~has_nbr)[:, None, None],
                            dropout_p=dropout_p, rng=rng)
    return out.reshape((n, c))
