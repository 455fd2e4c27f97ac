"""Winner-takes-all Laplace objective and the training loop."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from fimp import scene as sc
from fimp.config import TrainConfig
from fimp.diffcore import tensor as T
from fimp.diffcore.optim import OptimizerState, adamw_step, cosine_lr, optimizer_arrays, restore_optimizer
from fimp.diffcore.tensor import Tensor
from fimp.errors import FimpError, NonFiniteError
from fimp.futuredec import PredictionSet
from fimp.model import FimpModel, ForwardOutput, SceneInputs, build_scene_inputs
from fimp.scenariogen import load_labels, split_train_val

log = logging.getLogger("fimp.training")


@dataclass
class LossReport:
    regression: float
    classification: float
    total: float
    best_mode: np.ndarray  # per-agent winning mode (-1 where truth missing)


def wta_select(pred: PredictionSet, truth: np.ndarray) -> int:
    """Index of the mode with the lowest mean displacement to the truth.

    pred holds one agent's modes here: locations [M, T, 2]; truth [T, 2].
    Ties go to the lower mode index.
    """
    if not np.isfinite(truth).all():
        raise NonFiniteError("wta_select needs a complete ground-truth track")
    ade = np.linalg.norm(pred.locations - truth[None], axis=-1).mean(axis=-1)
    return int(np.argmin(ade))


def laplace_nll(mu, b, g) -> Tensor:
    """Mean over agents/timesteps of sum_dims[log(2b) + |g - mu| / b].

    mu, b: Tensors (or arrays) [..., 2]; g: ground truth of the same shape.
    """
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if (b.data <= 0).any():
        raise ValueError("Laplace scale must be positive")
    g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=mu.data.dtype)
    per_dim = T.log(2.0 * b) + T.absolute(mu - g) / b
    steps = per_dim.sum(axis=-1)  # sum over the two coordinates
    return steps.mean()


def smooth_l1(residual: Tensor, beta: float = 1.0) -> Tensor:
    """0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    a = T.absolute(residual)
    quad = (a.data < beta).astype(a.data.dtype)
    return quad * (0.5 / beta) * residual * residual + (1.0 - quad) * (a - 0.5 * beta)


def _endpoint_error(endpoints, truth_end: np.ndarray) -> Tensor:
    """|mu_T - g_T| per (mode, agent), on the tape: the displacement target
    carries gradient so the composed loss matches finite differences."""
    endpoints = endpoints if isinstance(endpoints, Tensor) else Tensor(endpoints)
    diff = endpoints - truth_end[None].astype(endpoints.data.dtype)
    return T.sqrt((diff * diff).sum(axis=-1) + 1e-12)


def classification_loss(d, endpoints, truth_end: np.ndarray) -> Tensor:
    """Smooth-L1 between estimated and actual endpoint displacement errors.

    d [M, N]; endpoints [M, N, 2] predicted final positions; truth_end [N, 2].
    """
    d = d if isinstance(d, Tensor) else Tensor(d)
    return smooth_l1(d - _endpoint_error(endpoints, truth_end)).mean()


def scene_loss(out: ForwardOutput, si: SceneInputs) -> tuple[Tensor | None, LossReport]:
    """Total per-scene loss: WTA Laplace regression + endpoint classification.

    Only agents with a fully valid future contribute.  Returns (None, report)
    when no agent qualifies.
    """
    valid = si.truth_valid
    n = si.num_agents
    best = np.full(n, -1, dtype=np.int64)
    if not valid.any():
        return None, LossReport(0.0, 0.0, 0.0, best)

    mu, scale = out.mu, out.scale  # [T, M, N, 2]
    t_f, m = mu.shape[0], mu.shape[1]
    vidx = np.nonzero(valid)[0]
    truth = si.truth_agent.astype(mu.data.dtype)   # [N, T, 2]

    # Winner per agent, from detached locations.
    ade = np.linalg.norm(
        mu.data.transpose(2, 1, 0, 3) - truth[:, None], axis=-1).mean(axis=-1)  # [N, M]
    best[vidx] = np.argmin(ade[vidx], axis=1)

    onehot = np.zeros((1, m, n, 1), dtype=mu.data.dtype)
    onehot[0, best[vidx], vidx, 0] = 1.0
    mu_best = (mu * onehot).sum(axis=1)        # [T, N, 2]
    b_best = (scale * onehot).sum(axis=1)
    g = truth.transpose(1, 0, 2)               # [T, N, 2]

    sel = np.zeros((1, n, 1), dtype=mu.data.dtype)
    sel[0, vidx, 0] = 1.0
    per_dim = T.log(2.0 * b_best) + T.absolute(mu_best - g) / b_best
    reg = (per_dim * sel).sum() * (1.0 / (len(vidx) * t_f))

    actual = _endpoint_error(mu[-1], si.truth_agent[:, -1])  # [M, N]
    resid = out.endpoint_d - actual
    cls = (smooth_l1(resid) * sel.reshape(1, n)).sum() * (1.0 / (len(vidx) * m))

    total = reg + cls
    reg_v, cls_v = float(reg.data), float(cls.data)
    return total, LossReport(reg_v, cls_v, reg_v + cls_v, best)


# -- data plumbing -----------------------------------------------------------

class SceneDataset:
    """Scenes + optional labels with a deterministic train/val split."""

    def __init__(self, scenes: list[sc.SceneFrame], labels: dict | None = None,
                 cache_limit: int = 64):
        self.scenes = {s.scene_id: s for s in scenes}
        self.labels = labels or {}
        train_ids, val_ids = split_train_val(list(self.scenes))
        self.train_ids = train_ids
        self.val_ids = val_ids
        self._cache: dict[str, SceneInputs] = {}
        self._cache_limit = cache_limit

    @classmethod
    def from_path(cls, path, cache_limit: int = 64) -> "SceneDataset":
        """`path` is a scenes.jsonl file or a directory holding
        scenes.jsonl (+ labels.jsonl)."""
        if os.path.isdir(path):
            scene_path = os.path.join(path, "scenes.jsonl")
            label_path = os.path.join(path, "labels.jsonl")
        else:
            scene_path = path
            label_path = os.path.join(os.path.dirname(path), "labels.jsonl")
        scenes = sc.load_scene_file(scene_path)
        labels = load_labels(label_path) if os.path.exists(label_path) else {}
        return cls(scenes, labels, cache_limit)

    def inputs(self, scene_id: str, cfg: TrainConfig) -> SceneInputs:
        si = self._cache.get(scene_id)
        if si is None:
            si = build_scene_inputs(self.scenes[scene_id], cfg)
            if len(self._cache) < self._cache_limit:
                self._cache[scene_id] = si
        return si


def _epoch_rng(seed: int, epoch: int, lane: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, lane]))


@dataclass
class TrainResult:
    checkpoint: str
    best_checkpoint: str
    log_path: str
    history: list  # per-epoch dicts
    best_min_fde: float


def train(cfg: TrainConfig, dataset, out_dir, resume: str | None = None,
          max_steps: int | None = None, stop_min_ade: float | None = None,
          quiet: bool = False) -> TrainResult:
    """Run the full loop: shuffled mini-batches, AdamW + cosine schedule,
    per-epoch validation; keeps the best-minFDE and last checkpoints.

    `dataset` is a SceneDataset or a path.  `max_steps` / `stop_min_ade`
    bound the run for overfit-style experiments.
    """
    from fimp.evalkit import evaluate_model  # local import to avoid a cycle

    if not isinstance(dataset, SceneDataset):
        dataset = SceneDataset.from_path(dataset)
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "metrics.csv")
    last_path = os.path.join(out_dir, "checkpoint.fimp")
    best_path = os.path.join(out_dir, "checkpoint_best.fimp")

    model = FimpModel(cfg)
    state = OptimizerState(base_lr=cfg.lr, weight_decay=cfg.weight_decay,
                           total_epochs=cfg.epochs)
    start_epoch = 0
    if resume:
        manifest, extras = model.load_checkpoint(resume)
        restore_optimizer(state, extras)
        meta = manifest.get("meta", {})
        start_epoch = int(meta.get("epoch", 0))
        state.step_count = int(meta.get("step_count", 0))

    history = []
    best_fde = float("inf")
    step = 0 if not resume else state.step_count
    mode = "a" if resume and os.path.exists(log_path) else "w"
    logf = open(log_path, mode, newline="")
    writer = csv.writer(logf)
    if mode == "w":
        writer.writerow(["epoch", "lr", "train_loss", "val_minADE", "val_minFDE"])

    train_ids = list(dataset.train_ids)
    if not train_ids:
        raise FimpError("dataset has no training scenes")
    stop = False
    t0 = time.time()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            state.lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
            order = list(train_ids)
            _epoch_rng(cfg.seed, epoch, 1).shuffle(order)
            losses = []
            for b0 in range(0, len(order), cfg.batch_size):
                batch = order[b0:b0 + cfg.batch_size]
                rng = _epoch_rng(cfg.seed, epoch, 100 + b0)
                model.store.zero_grad()
                batch_losses = []
                for sid in batch:
                    si = dataset.inputs(sid, cfg)
                    out = model.forward(si, training=cfg.dropout > 0, rng=rng)
                    loss, _ = scene_loss(out, si)
                    if loss is None:
                        continue
                    if not np.isfinite(loss.data):
                        raise NonFiniteError(
                            f"non-finite loss at epoch {epoch}, batch scenes {batch}")
                    loss.backward(np.asarray(1.0 / len(batch), dtype=loss.data.dtype))
                    batch_losses.append(float(loss.data))
                if not batch_losses:
                    continue
                adamw_step(model.store, state)
                losses.append(float(np.mean(batch_losses)))
                step += 1
                if max_steps is not None and step >= max_steps:
                    stop = True
                    break

            report = evaluate_model(model, dataset, split="val") \
                if dataset.val_ids else evaluate_model(model, dataset, split="train")
            train_loss = float(np.mean(losses)) if losses else float("nan")
            row = {"epoch": epoch, "lr": state.lr, "train_loss": train_loss,
                   "val_minADE": report.min_ade, "val_minFDE": report.min_fde}
            history.append(row)
            writer.writerow([epoch, f"{state.lr:.8f}", f"{train_loss:.6f}",
                             f"{report.min_ade:.6f}", f"{report.min_fde:.6f}"])
            logf.flush()
            if not quiet:
                log.info("epoch %d loss %.4f minADE %.3f minFDE %.3f (%.1fs)",
                         epoch, train_loss, report.min_ade, report.min_fde,
                         time.time() - t0)
            meta = {"epoch": epoch + 1, "step_count": state.step_count}
            model.save_checkpoint(last_path, optimizer_arrays(state), meta)
            if report.min_fde <= best_fde:
                best_fde = report.min_fde
                model.save_checkpoint(best_path, meta=meta)
            if stop_min_ade is not None and report.min_ade < stop_min_ade:
                stop = True
            if stop:
                break
    finally:
        logf.close()
    return TrainResult(checkpoint=last_path, best_checkpoint=best_path,
                       log_path=log_path, history=history, best_min_fde=best_fde)
