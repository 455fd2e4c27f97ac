"""Shared helpers for verification: reduced configs, toy scenes, and the
full-model gradient check."""

from __future__ import annotations

import math

import numpy as np

from fimp.config import TrainConfig
from fimp.diffcore.gradcheck import GradCheckReport, grad_check
from fimp.diffcore.tensor import using_dtype
from fimp.scene import T_TOTAL, AgentTrack, LanePolyline, SceneFrame


def reduced_config(**overrides) -> TrainConfig:
    """Smallest faithful model: every stage present, minimal widths/depths."""
    base = dict(feature_dim=16, heads=2, modes=2, zones=2, t_future=6, topk=10,
                temporal_layers=1, lane_layers=1, agent_layers=1,
                future_lane_layers=1, future_agent_layers=1, zone_attn_layers=1,
                motion_hidden=16, dropout=0.0, epochs=4, batch_size=4)
    base.update(overrides)
    return TrainConfig(**base)


def toy_scene(n_agents: int = 3, n_lanes: int = 2, seed: int = 0,
              spread: float = 25.0) -> SceneFrame:
    """Small fully-valid scene with mutually visible agents and a lane or two."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x707]))
    agents = []
    dt = 0.1
    for i in range(n_agents):
        ang = rng.uniform(-math.pi, math.pi)
        start = rng.uniform(-spread, spread, size=2)
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(3.0, 10.0)
        turn = rng.uniform(-0.02, 0.02)
        xy = np.zeros((T_TOTAL, 2))
        pos = start.copy()
        h = heading
        for t in range(T_TOTAL):
            xy[t] = pos
            h += turn
            pos = pos + speed * dt * np.array([math.cos(h), math.sin(h)])
        agents.append(AgentTrack(i, xy, np.ones(T_TOTAL, dtype=bool)))
    lanes = []
    for w in range(n_lanes):
        ref = agents[w % n_agents].xy
        idx = np.linspace(0, T_TOTAL - 1, 10).astype(int)
        pts = ref[idx] + rng.normal(0, 0.3, size=(10, 2))
        lanes.append(LanePolyline(pts, intersection=bool(w % 2),
                                  control=False, turn="none"))
    return SceneFrame(f"toy-{seed}", tuple(agents), tuple(lanes), av_index=0)


def full_model_loss_closure(cfg: TrainConfig, scene: SceneFrame, seed: int = 0):
    """(closure, store): scalar training loss of a freshly built model on one
    scene, for finite-difference checking.  Call inside a float64 context."""
    from fimp.model import FimpModel, build_scene_inputs
    from fimp.training import scene_loss

    model = FimpModel(cfg, init_seed=seed)
    si = build_scene_inputs(scene, cfg)

    def f():
        out = model.forward(si, training=False)
        loss, _ = scene_loss(out, si)
        return loss

    return f, model.store


def reduced_model_grad_check(tol: float | None = None, reduced: bool = True,
                             seed: int = 0,
                             max_coords_per_param: int = 8) -> GradCheckReport:
    """Gradient check in 64-bit mode.

    reduced=True: the full composed model on a 3-agent, 2-lane scene at the
    reduced shape (tol 1e-3), probing a coordinate sample of every
    parameter.  reduced=False: a single mha+gru+norm composition checked
    exhaustively at 1e-4.
    """
    with using_dtype(np.float64):
        if reduced:
            cfg = reduced_config()
            scene = toy_scene(n_agents=3, n_lanes=2, seed=seed)
            f, store = full_model_loss_closure(cfg, scene, seed=seed)
            return grad_check(f, store, tol=tol or 1e-3,
                              max_coords_per_param=max_coords_per_param,
                              rng=np.random.default_rng(seed))

        from fimp.diffcore import (
            ParamStore, Tensor, gru_cell, layer_norm, make_attention,
            make_gru, make_layer_norm, mha,
        )
        rng = np.random.default_rng(seed)
        store = ParamStore()
        attn = make_attention(store, "attn", 8, 2, rng)
        gru = make_gru(store, "gru", 8, rng)
        ln = make_layer_norm(store, "ln", 8)
        x = np.asarray(rng.normal(size=(3, 8)))
        y = np.asarray(rng.normal(size=(4, 8)))

        def f():
            a = mha(Tensor(x), Tensor(y), attn)
            h = gru_cell(a, Tensor(x), gru)
            return layer_norm(h, ln.gain, ln.bias).sum()

        return grad_check(f, store, tol=tol or 1e-4,
                          rng=np.random.default_rng(seed))
