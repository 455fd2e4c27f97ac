"""Metrics (minADE / minFDE / overlap / partner-hit), the ablation harness,
and the latency benchmark."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from fimp import kernels
from fimp.config import TrainConfig
from fimp.futuredec import InteractionGraph, random_interaction_graph
from fimp.model import FimpModel, ScenePrediction

from fimp.scenariogen import InteractionLabel

log = logging.getLogger("fimp.evalkit")


@dataclass
class MetricReport:
    min_ade: float = float("nan")
    min_fde: float = float("nan")
    overlap_rate: float | None = None
    partner_hit_rate: float | None = None
    latency_ms_per_agent: float | None = None
    per_kind: dict = field(default_factory=dict)
    n_agents: int = 0
    n_scenes: int = 0

    def row(self) -> dict:
        return {
            "minADE": self.min_ade, "minFDE": self.min_fde,
            "overlap_rate": self.overlap_rate,
            "partner_hit_rate": self.partner_hit_rate,
            "latency_ms_per_agent": self.latency_ms_per_agent,
            "n_agents": self.n_agents, "n_scenes": self.n_scenes,
        }


def min_fde(locations: np.ndarray, truth: np.ndarray) -> float:
    """Best final-step displacement over modes: locations [M, T, 2],
    truth [T, 2]."""
    if not np.isfinite(truth).all():
        raise ValueError("min_fde needs a complete ground-truth track")
    return float(np.linalg.norm(locations[:, -1] - truth[-1], axis=-1).min())


def min_ade(locations: np.ndarray, truth: np.ndarray) -> float:
    """Best mean displacement over modes (the minimizing mode is chosen by
    ADE, independently of FDE)."""
    if not np.isfinite(truth).all():
        raise ValueError("min_ade needs a complete ground-truth track")
    ade = np.linalg.norm(locations - truth[None], axis=-1).mean(axis=-1)
    return float(ade.min())


def overlap_rate(preds: dict[str, ScenePrediction],
                 labels: dict[str, list[InteractionLabel]],
                 threshold: float = 1.0) -> float | None:
    """Fraction of labeled pairs whose best-confidence modes pass within
    `threshold` meters at any common future timestep."""
    hits = 0
    total = 0
    for sid, pairs in labels.items():
        sp = preds.get(sid)
        if sp is None:
            continue
        slot = {int(a): s for s, a in enumerate(sp.agent_order)}
        for lab in pairs:
            si_, sj = slot.get(lab.i), slot.get(lab.j)
            if si_ is None or sj is None:
                continue
            bi = int(np.argmax(sp.pred.confidence[si_]))
            bj = int(np.argmax(sp.pred.confidence[sj]))
            ti = sp.locations_global[si_, bi]
            tj = sp.locations_global[sj, bj]
            d = np.linalg.norm(ti - tj, axis=-1)
            total += 1
            if (d < threshold).any():
                hits += 1
    return hits / total if total else None


def zone_windows(t_future: int, zones: int) -> list[tuple[int, int]]:
    """1-based future-step window covered by each zone (same mapping the
    step temporalization uses)."""
    per = t_future // zones
    return [(z * per + 1, (z + 1) * per) for z in range(zones)]


def partner_hit_rate(graphs: dict[str, InteractionGraph],
                     labels: dict[str, list[InteractionLabel]],
                     agent_orders: dict[str, np.ndarray],
                     t_future: int) -> float | None:
    """Fraction of labeled (i, j) where j is in i's selection for at least
    one (mode, zone) whose window overlaps the label window."""
    hits = 0
    total = 0
    for sid, pairs in labels.items():
        g = graphs.get(sid)
        if g is None or not pairs:
            continue
        order = agent_orders[sid]
        slot = {int(a): s for s, a in enumerate(order)}
        zones = g.indices.shape[1]
        windows = zone_windows(t_future, zones)
        for lab in pairs:
            si_, sj = slot.get(lab.i), slot.get(lab.j)
            if si_ is None or sj is None:
                continue
            total += 1
            hit = False
            for z, (lo, hi) in enumerate(windows):
                if hi < lab.t_start or lo > lab.t_end:
                    continue
                sel = g.indices[:, z, si_, :]
                ok = g.valid[:, z, si_, :]
                if ((sel == sj) & ok).any():
                    hit = True
                    break
            hits += hit
    return hits / total if total else None


def _scene_kind(scene_id: str) -> str:
    return scene_id.rsplit("-", 2)[0] if "-" in scene_id else "unknown"


def evaluate_predictions(preds: dict[str, ScenePrediction],
                         labels: dict | None = None,
                         t_future: int = 30) -> MetricReport:
    """Aggregate metrics over per-scene predictions (truth required)."""
    ades, fdes, kinds = [], [], []
    graphs, orders = {}, {}
    for sid, sp in preds.items():
        for s in range(len(sp.agent_order)):
            if not sp.truth_valid[s]:
                continue
            ades.append(min_ade(sp.locations_global[s], sp.truth_global[s]))
            fdes.append(min_fde(sp.locations_global[s], sp.truth_global[s]))
            kinds.append(_scene_kind(sid))
        if sp.graph is not None:
            graphs[sid] = sp.graph
            orders[sid] = sp.agent_order
    report = MetricReport(
        min_ade=float(np.mean(ades)) if ades else float("nan"),
        min_fde=float(np.mean(fdes)) if fdes else float("nan"),
        n_agents=len(ades), n_scenes=len(preds))
    if labels:
        report.overlap_rate = overlap_rate(preds, labels)
        if graphs:
            report.partner_hit_rate = partner_hit_rate(graphs, labels, orders,
                                                       t_future)
    by_kind: dict[str, list] = {}
    for kind, a, f in zip(kinds, ades, fdes):
        by_kind.setdefault(kind, []).append((a, f))
    report.per_kind = {
        k: {"minADE": float(np.mean([x for x, _ in v])),
            "minFDE": float(np.mean([y for _, y in v])), "n": len(v)}
        for k, v in by_kind.items()}
    return report


def predict_dataset(model: FimpModel, dataset, scene_ids=None,
                    graph_rng: np.random.Generator | None = None,
                    random_graph_k: int | None = None) -> dict[str, ScenePrediction]:
    """Forward every scene in eval mode.  When `random_graph_k` is set the
    learned selection is replaced by the random-subset baseline."""
    preds = {}
    ids = scene_ids if scene_ids is not None else list(dataset.scenes)
    for sid in ids:
        si = dataset.inputs(sid, model.cfg)
        override = None
        if random_graph_k is not None and si.num_agents > 1:
            override = random_interaction_graph(
                si.num_agents, model.cfg.modes, model.cfg.zones,
                random_graph_k, graph_rng or np.random.default_rng(0))
        out = model.forward(si, training=False, graph_override=override)
        preds[sid] = model.prediction_from_forward(si, out)
    return preds


def evaluate_model(model: FimpModel, dataset, split: str = "val",
                   labels: bool = True) -> MetricReport:
    ids = dataset.val_ids if split == "val" else dataset.train_ids
    preds = predict_dataset(model, dataset, ids)
    lab = dataset.labels if labels else None
    return evaluate_predictions(preds, lab, model.cfg.t_future)


# -- ablation harness ---------------------------------------------------------

TABLE_INTERACTION_ROWS = [
    {"use_history_aa": False, "use_future_al": False, "use_future_aa": False},
    {"use_history_aa": True, "use_future_al": False, "use_future_aa": False},
    {"use_history_aa": False, "use_future_al": False, "use_future_aa": True},
    {"use_history_aa": True, "use_future_al": False, "use_future_aa": True},
    {"use_history_aa": True, "use_future_al": True, "use_future_aa": True},
]

TABLE_MATCHING_ROWS = [
    {"strategy": "local_region", "strategy_radius": 50.0},
    {"strategy": "local_region", "strategy_radius": 100.0},
    {"strategy": "nearest_order", "topk": 5},
    {"strategy": "nearest_order", "topk": 10},
    {"strategy": "affinity_topk", "topk": 5},
    {"strategy": "affinity_topk", "topk": 10},
    {"strategy": "affinity_topk", "topk": 20},
]

TABLE_ZONE_ROWS = [{"zones": 3}, {"zones": 5}, {"zones": 6}, {"zones": 10}]

ABLATION_TABLES = {
    "interaction": TABLE_INTERACTION_ROWS,
    "matching": TABLE_MATCHING_ROWS,
    "zones": TABLE_ZONE_ROWS,
}


def _row_name(row: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in row.items())


def ablate(base_cfg: TrainConfig, dataset, table: str, out_csv,
           train_kwargs: dict | None = None, out_dir=None,
           workers: int = 1) -> list[dict]:
    """Train-from-scratch one model per grid row and evaluate it.

    Emits a CSV plus an aligned-text table next to it.  Rows follow the
    interaction on/off grid, the matching-strategy grid, or the zone-count
    grid.
    """
    if table not in ABLATION_TABLES:
        raise ValueError(f"unknown ablation table {table!r} "
                         f"(choose from {sorted(ABLATION_TABLES)})")
    rows = ABLATION_TABLES[table]
    out_dir = out_dir or os.path.dirname(os.path.abspath(out_csv))
    jobs = []
    for i, row in enumerate(rows):
        cfg = base_cfg.replace(**row)
        jobs.append((i, row, cfg, os.path.join(out_dir, f"{table}_{i}")))

    results = []
    run = _AblationRun(dataset, train_kwargs or {})
    if workers > 1:
        from multiprocessing import Pool
        with Pool(workers) as pool:
            results = pool.map(run, jobs)
    else:
        results = [run(j) for j in jobs]

    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(results[0].keys()))
        writer.writeheader()
        writer.writerows(results)
    txt = os.path.splitext(out_csv)[0] + ".txt"
    with open(txt, "w") as f:
        f.write(format_table(results))
    return results


class _AblationRun:
    """Picklable per-row trainer for the worker pool."""

    def __init__(self, dataset_path, train_kwargs):
        self.dataset_path = dataset_path
        self.train_kwargs = train_kwargs

    def __call__(self, job):
        from fimp.training import SceneDataset, train
        i, row, cfg, run_dir = job
        dataset = self.dataset_path
        if not isinstance(dataset, SceneDataset):
            dataset = SceneDataset.from_path(dataset)
        result = train(cfg, dataset, run_dir, quiet=True, **self.train_kwargs)
        model = FimpModel(cfg)
        model.load_checkpoint(result.best_checkpoint)
        report = evaluate_model(model, dataset)
        out = {"row": _row_name(row)}
        out.update({k: v for k, v in report.row().items()
                    if k not in ("latency_ms_per_agent",)})
        log.info("ablation %s: %s", out["row"], out)
        return out


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0].keys())
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# -- matching-strategy trend harness ------------------------------------------

TREND_STRATEGIES = {
    "affinity_topk": {"strategy": "affinity_topk", "topk": 10},
    "local_region": {"strategy": "local_region", "strategy_radius": 50.0},
    "nearest_order": {"strategy": "nearest_order", "topk": 5},
}


class _TrendRun:
    """Picklable (strategy, seed) trainer+evaluator for the worker pool."""

    def __init__(self, base_cfg: TrainConfig, dataset_path, out_dir,
                 train_kwargs=None):
        self.base_cfg = base_cfg
        self.dataset_path = dataset_path
        self.out_dir = out_dir
        self.train_kwargs = train_kwargs or {}

    def __call__(self, job):
        from fimp.training import SceneDataset, train
        name, seed = job
        cfg = self.base_cfg.replace(seed=seed, **TREND_STRATEGIES[name])
        dataset = SceneDataset.from_path(self.dataset_path, cache_limit=0)
        run_dir = os.path.join(self.out_dir, f"{name}-s{seed}")
        result = train(cfg, dataset, run_dir, quiet=True, **self.train_kwargs)
        model = FimpModel(cfg)
        model.load_checkpoint(result.best_checkpoint)
        preds = predict_dataset(model, dataset, dataset.val_ids)
        report = evaluate_predictions(preds, dataset.labels, cfg.t_future)
        log.info("trend %s seed %d: minFDE %.4f minADE %.4f hit %s",
                 name, seed, report.min_fde, report.min_ade,
                 report.partner_hit_rate)
        return {"strategy": name, "seed": seed, "minFDE": report.min_fde,
                "minADE": report.min_ade,
                "partner_hit_rate": report.partner_hit_rate}


def run_matching_trend(base_cfg: TrainConfig, dataset_path, out_dir,
                       seeds=(0, 1, 2), strategies=None, workers: int = 1,
                       train_kwargs=None) -> list[dict]:
    """Train every (strategy, seed) pair under an identical budget and
    evaluate val minFDE / minADE / partner-hit."""
    strategies = list(strategies or TREND_STRATEGIES)
    jobs = [(name, seed) for name in strategies for seed in seeds]
    runner = _TrendRun(base_cfg, dataset_path, out_dir, train_kwargs)
    if workers > 1:
        from multiprocessing import Pool
        with Pool(workers) as pool:
            return pool.map(runner, jobs)
    return [runner(j) for j in jobs]


def random_baseline_hit_rate(dataset, k: int, t_future: int, seed: int = 0,
                             scene_ids=None) -> float | None:
    """Partner-hit of the random-selection reference: one uniformly random
    k-subset per (scene, agent), shared across every (mode, zone)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))
    ids = scene_ids if scene_ids is not None else dataset.val_ids
    graphs, orders = {}, {}
    for sid in ids:
        labs = dataset.labels.get(sid)
        if not labs:
            continue
        scene = dataset.scenes[sid]
        order = np.array([i for i, a in enumerate(scene.agents) if a.valid_now])
        n = len(order)
        if n < 2:
            continue
        graphs[sid] = random_interaction_graph(n, 1, 1, k, rng)
        orders[sid] = order
    return partner_hit_rate(graphs, dataset.labels, orders, t_future)


# -- benchmarks ---------------------------------------------------------------

def bench_latency(model: FimpModel, dataset, repetitions: int = 100,
                  warmup: int = 10, scene_ids=None) -> float:
    """Median wall-clock forward time per agent, batch size 1.

    Cycles through the dataset's scenes; warmup forwards are excluded.
    """
    ids = list(scene_ids if scene_ids is not None else dataset.scenes)
    if not ids:
        raise ValueError("bench_latency needs at least one scene")
    inputs = [dataset.inputs(sid, model.cfg) for sid in ids]
    for i in range(warmup):
        model.forward(inputs[i % len(inputs)], training=False)
    samples = []
    for i in range(repetitions):
        si = inputs[i % len(inputs)]
        t0 = time.perf_counter()
        model.forward(si, training=False)
        dt = time.perf_counter() - t0
        samples.append(1000.0 * dt / max(si.num_agents, 1))
    return float(np.median(samples))


def bench_kernels(n: int = 200, c: int = 128, reps: int = 5,
                  seed: int = 0) -> dict:
    """Compare the affinity kernel backends against the naive pairwise loop."""
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n, c))

    def timeit(fn):
        best = float("inf")
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return best

    out = {
        "backend": kernels.BACKEND,
        "n": n, "c": c,
        "batch_s": timeit(lambda: kernels.affinity_matrix(feats)),
        "naive_s": timeit(lambda: kernels.affinity_matrix_naive(feats)),
        "numpy_s": timeit(lambda: kernels.numpy_impl.affinity_batch(
            feats[None].astype(np.float64))),
    }
    out["speedup_vs_naive"] = out["naive_s"] / out["batch_s"]
    return out
