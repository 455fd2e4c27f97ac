"""Full model: scene input assembly, forward pass, checkpointing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fimp import encoder as enc
from fimp import futuredec as fd
from fimp import scene as sc
from fimp.config import TrainConfig
from fimp.diffcore.params import ParamStore, config_hash, load_arrays, save_arrays
from fimp.diffcore.tensor import Tensor
from fimp.errors import CheckpointError


@dataclass
class SceneInputs:
    """Batched agent-centric arrays for one scene (model order = agents
    valid at the current step, in scene order)."""

    scene_id: str
    agent_order: np.ndarray      # model index -> scene agent index
    agent_ids: np.ndarray
    av_slot: int                 # model index of the reference agent
    positions: np.ndarray        # [N, 2] current global positions
    headings: np.ndarray         # [N]
    motion: np.ndarray           # [N, T_h, 2]
    motion_pad: np.ndarray       # [N, T_h]
    nbr_idx: np.ndarray          # [N, K] model indices
    nbr_mask: np.ndarray         # [N, K]
    nbr_pose: np.ndarray         # [N, K, 4]
    hist_lane: np.ndarray        # [N, S, 9]
    hist_lane_mask: np.ndarray   # [N, S]
    fut_lane: np.ndarray         # [N, S2, 9]
    fut_lane_mask: np.ndarray    # [N, S2]
    av_pose: np.ndarray          # [N, 4] pose of each agent in the AV frame
    pair_pose: np.ndarray        # [N, N, 4] pose of j in i's frame
    truth_agent: np.ndarray      # [N, T_f, 2] future in each agent's frame
    truth_global: np.ndarray     # [N, T_f, 2]
    truth_valid: np.ndarray      # [N] full-future validity

    @property
    def num_agents(self) -> int:
        return len(self.agent_order)


def _pose_encoding(translation: np.ndarray, dtheta: float) -> np.ndarray:
    return np.array([translation[0], translation[1],
                     math.cos(dtheta), math.sin(dtheta)])


def _pad_stack(rows: list[np.ndarray], width: int, feat: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(rows)
    out = np.zeros((n, width, feat), dtype=np.float64)
    mask = np.zeros((n, width), dtype=bool)
    for i, r in enumerate(rows):
        if len(r):
            out[i, :len(r)] = r
            mask[i, :len(r)] = True
    return out, mask


def build_scene_inputs(scene: sc.SceneFrame, cfg: TrainConfig) -> SceneInputs:
    order = [i for i, a in enumerate(scene.agents) if a.valid_now]
    n = len(order)
    slot_of = {scene_idx: slot for slot, scene_idx in enumerate(order)}
    tracks = [scene.agents[i] for i in order]
    headings = np.array([sc.current_heading(t) for t in tracks])
    positions = np.stack([t.position for t in tracks])

    motion = np.zeros((n, sc.T_HISTORY, 2))
    pad = np.zeros((n, sc.T_HISTORY), dtype=bool)
    for s, t in enumerate(tracks):
        motion[s], pad[s] = sc.motion_vectors(t)

    # Relative poses for every ordered pair (used by both history neighbors
    # and future messages).
    pair_pose = np.zeros((n, n, 4))
    pair_pose[:, :, 2] = 1.0  # cos(0) for the diagonal
    rot = np.stack([np.array([[math.cos(h), -math.sin(h)],
                              [math.sin(h), math.cos(h)]]) for h in headings])
    for i in range(n):
        rel = (positions - positions[i]) @ rot[i]
        dth = headings - headings[i]
        pair_pose[i, :, 0] = rel[:, 0]
        pair_pose[i, :, 1] = rel[:, 1]
        pair_pose[i, :, 2] = np.cos(dth)
        pair_pose[i, :, 3] = np.sin(dth)

    nbr_lists = []
    for s, scene_idx in enumerate(order):
        js = sc.sample_neighbors(scene, scene_idx, cfg.agent_radius)
        nbr_lists.append([slot_of[j] for j in js if j in slot_of])
    kmax = max((len(v) for v in nbr_lists), default=0)
    kmax = max(kmax, 1) if n > 1 else max(kmax, 0)
    nbr_idx = np.zeros((n, kmax), dtype=np.int64)
    nbr_mask = np.zeros((n, kmax), dtype=bool)
    for s, js in enumerate(nbr_lists):
        nbr_idx[s, :len(js)] = js
        nbr_mask[s, :len(js)] = True
    nbr_pose = pair_pose[np.arange(n)[:, None], nbr_idx] if kmax else \
        np.zeros((n, 0, 4))

    def lane_rows(radius: float) -> list[np.ndarray]:
        rows = []
        for s, scene_idx in enumerate(order):
            lanes = sc.sample_lanes(scene, scene_idx, radius)
            if lanes:
                rows.append(np.concatenate([
                    sc.lane_segments(scene.lanes[w], positions[s], headings[s])
                    for w in lanes]))
            else:
                rows.append(np.zeros((0, sc.LANE_FEATURE_DIM)))
        return rows

    hist_rows = lane_rows(cfg.lane_radius)
    fut_rows = lane_rows(cfg.future_lane_radius)
    s_hist = max((len(r) for r in hist_rows), default=0)
    s_fut = max((len(r) for r in fut_rows), default=0)
    hist_lane, hist_mask = _pad_stack(hist_rows, s_hist, sc.LANE_FEATURE_DIM)
    fut_lane, fut_mask = _pad_stack(fut_rows, s_fut, sc.LANE_FEATURE_DIM)

    av_slot = slot_of[scene.av_index]
    av_pose = pair_pose[av_slot].copy()  # pose of each agent in the AV frame

    t_f = cfg.t_future
    truth_global = np.stack([t.xy[sc.T_HISTORY:sc.T_HISTORY + t_f] for t in tracks])
    truth_valid = np.array([bool(t.mask[sc.T_HISTORY:sc.T_HISTORY + t_f].all())
                            for t in tracks])
    truth_agent = np.zeros_like(truth_global)
    for s in range(n):
        truth_agent[s] = sc.to_agent_frame(truth_global[s], positions[s], headings[s])

    return SceneInputs(
        scene_id=scene.scene_id,
        agent_order=np.array(order, dtype=np.int64),
        agent_ids=np.array([t.agent_id for t in tracks], dtype=np.int64),
        av_slot=av_slot, positions=positions, headings=headings,
        motion=motion, motion_pad=pad,
        nbr_idx=nbr_idx, nbr_mask=nbr_mask, nbr_pose=nbr_pose,
        hist_lane=hist_lane, hist_lane_mask=hist_mask,
        fut_lane=fut_lane, fut_lane_mask=fut_mask,
        av_pose=av_pose, pair_pose=pair_pose,
        truth_agent=truth_agent, truth_global=truth_global,
        truth_valid=truth_valid)


@dataclass
class ForwardOutput:
    """Tape tensors from one forward pass plus the selection graph."""

    mu: Tensor          # [T, M, N, 2] agent-frame locations
    scale: Tensor       # [T, M, N, 2]
    endpoint_d: Tensor  # [M, N]
    confidence: Tensor  # [M, N]
    history: Tensor     # [N, C] interaction-aware history feature
    graph: fd.InteractionGraph | None


@dataclass
class ScenePrediction:
    """Numpy view of a forward pass for metrics, files and plots."""

    scene_id: str
    agent_ids: np.ndarray
    agent_order: np.ndarray
    pred: fd.PredictionSet
    locations_global: np.ndarray  # [N, M, T, 2]
    graph: fd.InteractionGraph | None
    truth_global: np.ndarray
    truth_valid: np.ndarray


class FimpModel:
    """Encoder + future decoder over one scene at a time."""

    def __init__(self, cfg: TrainConfig, init_seed: int | None = None):
        self.cfg = cfg
        self.store = ParamStore()
        seed = cfg.seed if init_seed is None else init_seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        self.enc = enc.build_encoder(self.store, cfg, rng)
        self.dec = fd.build_decoder(self.store, cfg, rng)

    # -- forward ----------------------------------------------------------

    def forward(self, si: SceneInputs, training: bool = False,
                rng: np.random.Generator | None = None,
                graph_override: fd.InteractionGraph | None = None) -> ForwardOutput:
        cfg = self.cfg
        drop = cfg.dropout if training else 0.0
        if drop > 0.0 and rng is None:
            raise ValueError("training-mode forward needs an RNG for dropout")

        h_raw = enc.encode_motion(self.enc, si.motion, si.motion_pad, drop, rng)
        lane_emb = enc.embed_lane(self.enc, si.hist_lane)
        h_lane = enc.fuse_lanes(self.enc, h_raw, lane_emb, si.hist_lane_mask,
                                drop, rng)
        if cfg.use_history_aa:
            h_tilde = enc.fuse_agents(self.enc, h_lane, si.nbr_idx, si.nbr_mask,
                                      si.nbr_pose, drop, rng)
        else:
            h_tilde = h_lane

        modes = fd.multi_head_projection(self.dec, h_tilde)     # [M, N, C]
        zone_list = fd.temporalize_zones(self.dec, modes, h_raw, cfg.zones)
        zones = fd.T.stack(zone_list, axis=1)                   # [M, Z, N, C]

        if cfg.use_future_al and si.fut_lane.shape[1] > 0:
            fut_lane_emb = enc.embed_lane(self.enc, si.fut_lane)
            zones = fd.fuse_future_lanes(self.dec, zones, fut_lane_emb,
                                         si.fut_lane_mask, drop, rng)

        graph = graph_override
        if cfg.use_future_aa and si.num_agents > 1:
            if graph is None:
                if cfg.strategy == "affinity_topk":
                    ref = fd.project_to_reference(self.dec, zones, si.av_pose)
                    graph = fd.build_interaction_graph(cfg, ref.data, si.positions)
                else:
                    graph = fd.build_interaction_graph(cfg, None, si.positions)
            zones = fd.fuse_future_agents(self.dec, zones, graph, si.pair_pose,
                                          drop, rng)

        zones = fd.zone_temporal_attention(self.dec, zones, drop, rng)
        zone_list = [zones[:, z, :, :] for z in range(cfg.zones)]
        steps = fd.temporalize_steps(self.dec, zone_list, modes, cfg.t_future)
        mu, scale, d, conf = fd.prediction_head(self.dec, steps)
        return ForwardOutput(mu=mu, scale=scale, endpoint_d=d, confidence=conf,
                             history=h_tilde, graph=graph)


    # -- inference --------------------------------------------------------

    def predict(self, scene: sc.SceneFrame,
                si: SceneInputs | None = None) -> ScenePrediction:
        si = si or build_scene_inputs(scene, self.cfg)
        out = self.forward(si, training=False)
        return self.prediction_from_forward(si, out)

    def prediction_from_forward(self, si: SceneInputs,
                                out: ForwardOutput) -> ScenePrediction:
        mu = out.mu.data.transpose(2, 1, 0, 3)       # [N, M, T, 2]
        scale = out.scale.data.transpose(2, 1, 0, 3)
        d = out.endpoint_d.data.T                    # [N, M]
        conf = out.confidence.data.T
        n, m, t, _ = mu.shape
        mu_global = np.empty_like(mu, dtype=np.float64)
        for s in range(n):
            flat = mu[s].reshape(-1, 2)
            mu_global[s] = sc.from_agent_frame(
                flat, si.positions[s], si.headings[s]).reshape(m, t, 2)
        pred = fd.PredictionSet(locations=mu, scales=scale, endpoint_d=d,
                                confidence=conf)
        return ScenePrediction(
            scene_id=si.scene_id, agent_ids=si.agent_ids,
            agent_order=si.agent_order, pred=pred,
            locations_global=mu_global, graph=out.graph,
            truth_global=si.truth_global, truth_valid=si.truth_valid)

    # -- persistence ------------------------------------------------------

    def config_hash(self) -> str:
        return config_hash(self.cfg.model_canonical())

    def save_checkpoint(self, path, extra_arrays: dict | None = None,
                        meta: dict | None = None) -> None:
        arrays = {name: t.data for name, t in self.store.items()}
        if extra_arrays:
            arrays.update(extra_arrays)
        save_arrays(path, arrays, cfg_hash=self.config_hash(), meta=meta)

    def load_checkpoint(self, path, strict_hash: bool = True) -> tuple[dict, dict]:
        manifest, arrays = load_arrays(path)
        if strict_hash and manifest.get("config_hash") != self.config_hash():
            raise CheckpointError(
                f"{path}: checkpoint config hash {manifest.get('config_hash')} "
                f"does not match the model ({self.config_hash()})")
        params = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
        extras = {k: v for k, v in arrays.items() if k.startswith("optim.")}
        self.store.load_values(params)
        return manifest, extras
