"""Command-line entry point.

Subcommands: gen-data, train, predict, eval, ablate, bench, grad-check.
All randomness is controlled by --seed; FIMP_LOG sets the log level.
Config overrides are trailing key=value arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from fimp import __version__
from fimp.config import TrainConfig, load_config, parse_overrides
from fimp.errors import FimpError

log = logging.getLogger("fimp")


def _setup_logging() -> None:
    level = os.environ.get("FIMP_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _build_config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    flag_overrides = []
    for flag, key in (("seed", "seed"), ("strategy", "strategy"), ("k", "topk"),
                      ("radius", "strategy_radius"), ("zones", "zones"),
                      ("epochs", "epochs")):
        v = getattr(args, flag, None)
        if v is not None:
            flag_overrides.append(f"{key}={v}")
    cfg = parse_overrides(flag_overrides, base=cfg)
    return parse_overrides(getattr(args, "overrides", []) or [], base=cfg)


def _parse_counts(items) -> dict:
    counts = {}
    for item in items:
        for part in item.split(","):
            if not part:
                continue
            if "=" not in part:
                raise FimpError(f"counts must look like kind=n, got {part!r}")
            kind, n = part.split("=", 1)
            counts[kind.strip()] = int(n)
    return counts


def cmd_gen_data(args) -> int:
    from fimp.scenariogen import generate_dataset
    counts = _parse_counts(args.counts)
    summary = generate_dataset(counts, seed=args.seed or 0, out_dir=args.out,
                               noise=args.noise,
                               agent_range=(args.agents_min, args.agents_max),
                               workers=args.workers)
    log.info("wrote %(n_total)d scenes (%(n_train)d train / %(n_val)d val) to %(scenes)s",
             summary)
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    from fimp.training import train
    cfg = _build_config(args)
    result = train(cfg, args.data, args.out)
    print(json.dumps({"checkpoint": result.checkpoint,
                      "best_checkpoint": result.best_checkpoint,
                      "log": result.log_path,
                      "best_minFDE": result.best_min_fde}))
    return 0


def _load_model(args, cfg: TrainConfig):
    from fimp.model import FimpModel
    model = FimpModel(cfg)
    if args.checkpoint:
        model.load_checkpoint(args.checkpoint, strict_hash=not getattr(
            args, "no_strict_hash", False))
    return model


def cmd_predict(args) -> int:
    from fimp.scene import load_scene_file
    from fimp.training import SceneDataset
    from fimp.evalkit import predict_dataset

    cfg = _build_config(args)
    model = _load_model(args, cfg)
    scenes = load_scene_file(args.data)
    dataset = SceneDataset(scenes, cache_limit=0)
    preds = predict_dataset(model, dataset, list(dataset.scenes))
    with open(args.out, "w", encoding="utf-8") as f:
        for sid, sp in preds.items():
            for s, agent_id in enumerate(sp.agent_ids):
                f.write(json.dumps({
                    "scene_id": sid,
                    "agent_id": int(agent_id),
                    "modes": [
                        {"confidence": float(sp.pred.confidence[s, m]),
                         "xy": [[float(x), float(y)]
                                for x, y in sp.locations_global[s, m]],
                         "scale": [[float(bx), float(by)]
                                   for bx, by in sp.pred.scales[s, m]]}
                        for m in range(sp.pred.confidence.shape[1])
                    ],
                }))
                f.write("\n")
    if args.plots:
        from fimp.svgplot import write_scene_svg
        os.makedirs(args.plots, exist_ok=True)
        for scene in scenes:
            write_scene_svg(os.path.join(args.plots, f"{scene.scene_id}.svg"),
                            scene, preds.get(scene.scene_id))
    log.info("wrote predictions for %d scenes to %s", len(preds), args.out)
    return 0


def load_prediction_file(path) -> dict:
    """pred file -> {scene_id: {agent_id: (conf [M], xy [M, T, 2], scale)}}."""
    out: dict = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            modes = rec["modes"]
            out.setdefault(rec["scene_id"], {})[rec["agent_id"]] = (
                np.array([m["confidence"] for m in modes]),
                np.array([m["xy"] for m in modes], dtype=np.float64),
                np.array([m["scale"] for m in modes], dtype=np.float64),
            )
    return out


def cmd_eval(args) -> int:
    from fimp.scene import T_HISTORY, load_scene_file
    from fimp.scenariogen import load_labels
    from fimp.futuredec import PredictionSet
    from fimp.model import ScenePrediction
    from fimp.evalkit import evaluate_predictions

    scenes = {s.scene_id: s for s in load_scene_file(args.data)}
    labels = load_labels(args.labels) if args.labels else None
    per_scene = load_prediction_file(args.pred)

    preds = {}
    for sid, agents in per_scene.items():
        scene = scenes.get(sid)
        if scene is None:
            raise FimpError(f"predictions reference unknown scene {sid}")
        order, ids, locs, confs, scales, truth, tvalid = [], [], [], [], [], [], []
        t_f = None
        for idx, a in enumerate(scene.agents):
            if a.agent_id not in agents:
                continue
            conf, xy, scale = agents[a.agent_id]
            t_f = xy.shape[1]
            order.append(idx)
            ids.append(a.agent_id)
            locs.append(xy)
            confs.append(conf)
            scales.append(scale)
            truth.append(a.xy[T_HISTORY:T_HISTORY + t_f])
            tvalid.append(bool(a.mask[T_HISTORY:T_HISTORY + t_f].all()))
        locs = np.array(locs)
        preds[sid] = ScenePrediction(
            scene_id=sid, agent_ids=np.array(ids), agent_order=np.array(order),
            pred=PredictionSet(locations=locs, scales=np.array(scales),
                               endpoint_d=np.zeros(locs.shape[:2]),
                               confidence=np.array(confs)),
            locations_global=locs, graph=None,
            truth_global=np.array(truth), truth_valid=np.array(tvalid))

    if args.checkpoint:
        # Re-run forwards to recover selection graphs for the partner metric.
        from fimp.training import SceneDataset
        from fimp.evalkit import predict_dataset
        cfg = _build_config(args)
        model = _load_model(args, cfg)
        dataset = SceneDataset(list(scenes.values()), labels, cache_limit=0)
        graph_preds = predict_dataset(model, dataset, list(per_scene))
        for sid, sp in graph_preds.items():
            preds[sid].graph = sp.graph

    report = evaluate_predictions(preds, labels)
    print(json.dumps(report.row(), indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report.row() | {"per_kind": report.per_kind}, f, indent=2)
    return 0


def cmd_ablate(args) -> int:
    from fimp.evalkit import ablate
    cfg = _build_config(args)
    rows = ablate(cfg, args.data, args.table, args.out, workers=args.workers)
    from fimp.evalkit import format_table
    print(format_table(rows))
    return 0


def cmd_bench(args) -> int:
    from fimp.evalkit import bench_kernels, bench_latency
    from fimp.training import SceneDataset

    result = {}
    if args.kernels:
        result["kernels"] = bench_kernels(n=args.n_agents, reps=args.reps)
    if args.data:
        cfg = _build_config(args)
        dataset = SceneDataset.from_path(args.data)
        if args.sweep_zones:
            sweep = {}
            for z in (int(v) for v in args.sweep_zones.split(",")):
                zcfg = cfg.replace(zones=z)
                model = _load_model(args, zcfg) if args.checkpoint else None
                if model is None:
                    from fimp.model import FimpModel
                    model = FimpModel(zcfg)
                sweep[z] = bench_latency(model, dataset, repetitions=args.reps)
            result["latency_ms_per_agent_by_zones"] = sweep
        else:
            model = _load_model(args, cfg)
            result["latency_ms_per_agent"] = bench_latency(
                model, dataset, repetitions=args.reps)
    print(json.dumps(result, indent=2))
    return 0


def cmd_grad_check(args) -> int:
    from fimp.acceptutil import reduced_model_grad_check
    report = reduced_model_grad_check(tol=args.tol, reduced=args.reduced,
                                      seed=args.seed or 0)
    print(report.summary())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fimp", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        if config:
            sp.add_argument("--config", default=None, help="flat key=value file")
            sp.add_argument("--strategy", default=None,
                            choices=["affinity_topk", "local_region", "nearest_order"])
            sp.add_argument("--k", type=int, default=None)
            sp.add_argument("--radius", type=float, default=None)
            sp.add_argument("--zones", type=int, default=None)
            sp.add_argument("--epochs", type=int, default=None)
            sp.add_argument("overrides", nargs="*", metavar="key=value")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    sp.add_argument("--counts", action="append", required=True,
                    metavar="kind=n[,kind=n]")
    sp.add_argument("--out", required=True)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--agents-min", type=int, default=18)
    sp.add_argument("--agents-max", type=int, default=22)
    common(sp, config=False)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="write a predictions file (+ SVG plots)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plots", default=None)
    sp.add_argument("--no-strict-hash", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="evaluate a predictions file")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--labels", default=None)
    sp.add_argument("--checkpoint", default=None,
                    help="recompute selection graphs for partner_hit_rate")
    sp.add_argument("--no-strict-hash", action="store_true")
    sp.add_argument("--out", default=None)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run an ablation table")
    sp.add_argument("--data", required=True)
    sp.add_argument("--table", required=True,
                    choices=["interaction", "matching", "zones"])
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="latency / kernel benchmarks")
    sp.add_argument("--data", default=None)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--no-strict-hash", action="store_true")
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--kernels", action="store_true",
                    help="compare affinity kernel backends")
    sp.add_argument("--n-agents", type=int, default=200)
    sp.add_argument("--sweep-zones", default=None, metavar="Z1,Z2,...")
    common(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("grad-check", help="finite-difference gradient check")
    sp.add_argument("--reduced", action="store_true",
                    help="full reduced model instead of per-op checks")
    sp.add_argument("--tol", type=float, default=None)
    common(sp, config=False)
    sp.set_defaults(func=cmd_grad_check)
    return p


def run(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FimpError as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
