"""Future decoder: mode projection, zone temporalization, future interaction
via affinity top-k, and the Laplace prediction head.

The decoder derives per-mode future features decoupled from the history
feature: a bank of mode MLPs followed by a GRU that unrolls each mode
embedding into Z future time zones (the raw history feature is the initial
hidden state).  Interactions are modeled per (mode, zone): zone features are
projected into the reference (AV) feature space, pairwise affinities are
negative squared feature distances, and only each agent's top-k affinity
neighbors exchange messages.  A second GRU expands zones into per-timestep
features for the Laplace regression head.

The reference projection MLPs are shared with the message projection
(`who interacts` is scored in the same learned space that `what is
exchanged` is built from), which is also what routes gradient into the
affinity space: top-k selection itself is discrete.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fimp.config import MAX_ZONES, TrainConfig
from fimp.diffcore import nn
from fimp.diffcore import tensor as T
from fimp.diffcore.params import GruParams, MlpParams, ParamStore, make_gru, make_mlp, token_init
from fimp.diffcore.tensor import Tensor
from fimp.encoder import (
    apply_cross_stack,
    apply_self_block,
    make_cross_block,
    make_self_block,
    project_features,
)
from fimp import kernels

SCALE_EPS = 0.001


@dataclass
class InteractionGraph:
    """Per (mode, zone) top-k selection: who may message whom."""

    indices: np.ndarray  # [M, Z, N, K] neighbor indices
    valid: np.ndarray    # [M, Z, N, K] False on padding entries
    scores: np.ndarray   # [M, Z, N, K] affinity of each selected pair
    k: int
    strategy: str

    def selected(self, mode: int, zone: int, agent: int) -> list[int]:
        row = self.indices[mode, zone, agent]
        return [int(j) for j, ok in zip(row, self.valid[mode, zone, agent]) if ok]


@dataclass
class PredictionSet:
    """Per-scene multimodal Laplace forecasts (agent-frame locations)."""

    locations: np.ndarray   # [N, M, T, 2]
    scales: np.ndarray      # [N, M, T, 2] strictly positive
    endpoint_d: np.ndarray  # [N, M] predicted endpoint displacement error
    confidence: np.ndarray  # [N, M] softmin of endpoint_d, rows sum to 1


@dataclass
class DecoderParams:
    mode_mlps: list
    gru_zone: GruParams
    gru_step: GruParams
    lane_blocks: list
    ref_feat_mlp: MlpParams
    ref_pose_mlp: MlpParams
    agent_blocks: list
    zone_pos: Tensor
    zone_blocks: list
    head_mlp: MlpParams
    endpoint_mlp: MlpParams


def build_decoder(store: ParamStore, cfg: TrainConfig, rng) -> DecoderParams:
    c = cfg.feature_dim
    h = cfg.heads
    hid = cfg.motion_hidden
    return DecoderParams(
        mode_mlps=[make_mlp(store, f"future.mode{m}", (c, c, c), rng)
                   for m in range(cfg.modes)],
        gru_zone=make_gru(store, "future.gru_zone", c, rng),
        gru_step=make_gru(store, "future.gru_step", c, rng),
        lane_blocks=[make_cross_block(store, f"future.lane{i}", c, h, rng)
                     for i in range(cfg.future_lane_layers)],
        ref_feat_mlp=make_mlp(store, "future.ref_feat", (c, c, c), rng),
        ref_pose_mlp=make_mlp(store, "future.ref_pose", (4, hid, c), rng),
        agent_blocks=[make_cross_block(store, f"future.agent{i}", c, h, rng)
                      for i in range(cfg.future_agent_layers)],
        zone_pos=store.add("future.zone_pos", token_init((MAX_ZONES, c), rng)),
        zone_blocks=[make_self_block(store, f"future.zone{i}", c, h, rng)
                     for i in range(cfg.zone_attn_layers)],
        head_mlp=make_mlp(store, "future.head", (c, 2 * c, 4), rng),
        endpoint_mlp=make_mlp(store, "future.endpoint", (c, 2 * c, 1), rng),
    )


def multi_head_projection(dp: DecoderParams, h: Tensor) -> Tensor:
    """Mode embeddings [M, N, C]: one independent MLP per mode over H-tilde."""
    return T.stack([nn.mlp_block(h, mlp) for mlp in dp.mode_mlps], axis=0)


def temporalize_zones(dp: DecoderParams, modes: Tensor, history: Tensor,
                      zones: int) -> list:
    """Unroll each mode embedding into Z zone features.

    The GRU input is the (constant) mode embedding at every step; the raw
    history feature is the initial hidden state.  Returns Z tensors [M, N, C].
    """
    m, n, c = modes.shape
    h = history.reshape((1, n, c)) + np.zeros((m, n, c), dtype=history.data.dtype)
    out = []
    for _ in range(zones):
        h = nn.gru_cell(modes, h, dp.gru_zone)
        out.append(h)
    return out


def fuse_future_lanes(dp: DecoderParams, zone_feats: Tensor, lane_emb: Tensor,
                      lane_mask: np.ndarray, dropout_p: float = 0.0, rng=None) -> Tensor:
    """Cross-attend each (mode, zone) feature over wide-radius lane segments.

    zone_feats [M, Z, N, C]; lane_emb [N, S, C]; lane_mask [N, S].
    """
    m, z, n, c = zone_feats.shape
    if lane_emb.shape[1] == 0:
        return zone_feats
    has_lane = lane_mask.any(axis=1)
    kv_mask = lane_mask.copy()
    kv_mask[~has_lane, 0] = True
    q = zone_feats.reshape((m, z, n, 1, c))
    kv = lane_emb.reshape((1, 1) + lane_emb.shape)
    out = apply_cross_stack(dp.lane_blocks, q, kv,
                            kv_mask[None, None, :, None, :],
                            bypass=(~has_lane)[None, None, :, None, None],
                            dropout_p=dropout_p, rng=rng)
    return out.reshape((m, z, n, c))


def project_to_reference(dp: DecoderParams, zone_feats: Tensor,
                         av_pose: np.ndarray) -> Tensor:
    """Project zone features into the reference (AV) feature space.

    av_pose [N, 4] encodes each agent's pose in the AV frame.  Weights are
    shared across agents and with the message projection.
    """
    pose = av_pose[None, None, :, :]
    return project_features(dp.ref_feat_mlp, dp.ref_pose_mlp, zone_feats,
                            np.broadcast_to(pose, zone_feats.shape[:2] + av_pose.shape))


def affinity(fa: np.ndarray, fb: np.ndarray) -> float:
    """Affinity of one feature pair: -|fa - fb|^2 in decomposed form."""
    return kernels.affinity_pair(fa, fb)


def select_topk(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k selection on [..., N, N] affinities; ties toward lower index,
    self excluded.  Returns (indices, valid) with K = min(k, N-1)."""
    idx = kernels.topk_select(scores, k)
    return idx, np.ones(idx.shape, dtype=bool)


def build_interaction_graph(cfg: TrainConfig, ref_feats: np.ndarray | None,
                            positions: np.ndarray) -> InteractionGraph:
    """Selection per the configured matching strategy.

    affinity_topk ranks by reference-space feature distance per (mode,
    zone); nearest_order ranks by current-time distance; local_region keeps
    everyone inside a radius (variable set sizes, padded).
    """
    n = positions.shape[0]
    m, z = cfg.modes, cfg.zones
    if cfg.strategy == "affinity_topk":
        if ref_feats is None:
            raise ValueError("affinity_topk needs reference-projected features")
        scores = kernels.affinity_matrix(ref_feats)  # [M, Z, N, N]
        idx, valid = select_topk(scores, cfg.topk)
        sel_scores = np.take_along_axis(scores, idx, axis=-1)
        return InteractionGraph(idx, valid, sel_scores, cfg.topk, cfg.strategy)

    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    if cfg.strategy == "nearest_order":
        idx, valid = select_topk(-d2[None, None], cfg.topk)
        scores = np.take_along_axis(-d2[None, None], idx, axis=-1)
        idx = np.broadcast_to(idx, (m, z) + idx.shape[2:]).copy()
        valid = np.ones(idx.shape, dtype=bool)
        scores = np.broadcast_to(scores, idx.shape).copy()
        return InteractionGraph(idx, valid, scores, cfg.topk, cfg.strategy)

    # local_region: everyone within the radius, any count.
    r2 = cfg.strategy_radius ** 2
    inside = (d2 <= r2) & ~np.eye(n, dtype=bool)
    kmax = max(int(inside.sum(axis=1).max()), 1) if n > 1 else 1
    idx = np.zeros((n, kmax), dtype=np.int64)
    valid = np.zeros((n, kmax), dtype=bool)
    scores = np.zeros((n, kmax))
    for i in range(n):
        js = np.nonzero(inside[i])[0]
        idx[i, :js.size] = js
        valid[i, :js.size] = True
        scores[i, :js.size] = -d2[i, js]
    tile = lambda a: np.broadcast_to(a[None, None], (m, z) + a.shape).copy()
    return InteractionGraph(tile(idx), tile(valid), tile(scores), kmax, cfg.strategy)


def random_interaction_graph(n: int, modes: int, zones: int, k: int,
                             rng: np.random.Generator) -> InteractionGraph:
    """Baseline: one uniformly random k-subset per agent, shared across all
    (mode, zone) pairs — a learned-selection-free reference."""
    kk = min(k, n - 1)
    idx = np.zeros((n, kk), dtype=np.int64)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        idx[i] = rng.choice(others, size=kk, replace=False)
    tile = np.broadcast_to(idx[None, None], (modes, zones, n, kk)).copy()
    valid = np.ones(tile.shape, dtype=bool)
    return InteractionGraph(tile, valid, np.zeros(tile.shape), k, "random_subset")


def fuse_future_agents(dp: DecoderParams, zone_feats: Tensor,
                       graph: InteractionGraph, pair_pose: np.ndarray,
                       dropout_p: float = 0.0, rng=None) -> Tensor:
    """Message passing restricted to each agent's selected pairs.

    Message content for pair (i, j): MLP(F_j) + MLP(pose of j in i's frame),
    with the same MLPs as the reference projection.  pair_pose [N, N, 4].
    """
    m, z, n, c = zone_feats.shape
    kk = graph.indices.shape[-1]
    if kk == 0:
        return zone_feats
    feats = T.gather(zone_feats, graph.indices)  # [M, Z, N, K, C]
    pose = pair_pose[np.arange(n)[:, None], graph.indices]  # [M, Z, N, K, 4]
    keys = project_features(dp.ref_feat_mlp, dp.ref_pose_mlp, feats, pose)
    has_sel = graph.valid.any(axis=-1)
    kv_mask = graph.valid.copy()
    kv_mask[~has_sel, 0] = True
    q = zone_feats.reshape((m, z, n, 1, c))
    out = apply_cross_stack(dp.agent_blocks, q, keys, kv_mask[:, :, :, None, :],
                            bypass=(~has_sel)[:, :, :, None, None],
                            dropout_p=dropout_p, rng=rng)
    return out.reshape((m, z, n, c))


def zone_temporal_attention(dp: DecoderParams, zone_feats: Tensor,
                            dropout_p: float = 0.0, rng=None) -> Tensor:
    """Self-attention across the Z zone positions of each (mode, agent)."""
    m, z, n, c = zone_feats.shape
    x = zone_feats.transpose((0, 2, 1, 3))  # [M, N, Z, C]
    pos = dp.zone_pos[:z, :]
    for block in dp.zone_blocks:
        x = apply_self_block(x, block, pos, None, dropout_p, rng)
    return x.transpose((0, 2, 1, 3))


def temporalize_steps(dp: DecoderParams, zone_list: list, modes: Tensor,
                      t_future: int) -> list:
    """Expand zone features into T per-timestep features.

    The mode embedding is the initial hidden state; each zone feature is the
    GRU input for every timestep it covers.  Returns T tensors [M, N, C].
    """
    zones = len(zone_list)
    if t_future % zones != 0:
        raise ValueError(f"zones {zones} must divide t_future {t_future}")
    per = t_future // zones
    h = modes
    out = []
    for t in range(t_future):
        h = nn.gru_cell(zone_list[t // per], h, dp.gru_step)
        out.append(h)
    return out


def prediction_head(dp: DecoderParams, step_feats: list):
    """Laplace parameters per timestep plus endpoint-error estimates.

    The per-step MLP emits a displacement delta; locations are the running
    sum, so late-horizon magnitudes are a sum of uniformly scaled per-step
    outputs rather than a single large regression target.  Returns
    (mu [T, M, N, 2], scale [T, M, N, 2], d [M, N], conf [M, N]);
    confidences are softmin over modes of the endpoint estimates.
    """
    x = T.stack(step_feats, axis=0)            # [T, M, N, C]
    out = nn.mlp_block(x, dp.head_mlp)         # [T, M, N, 4]
    mu = T.cumsum(out[..., 0:2], axis=0)
    scale = nn.elu_plus_one(out[..., 2:4], SCALE_EPS)
    d = nn.mlp_block(step_feats[-1], dp.endpoint_mlp)  # [M, N, 1]
    m, n = d.shape[0], d.shape[1]
    d = d.reshape((m, n))
    conf = T.softmax(-d, axis=0)               # softmin over modes
    return mu, scale, d, conf
