"""Command-line entry points: synthetic data generation, preprocessing,
training, evaluation, ablation grids and edge diagnostics.

Every run writes a manifest capturing its config hash and seed; run
directories are never overwritten.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cluster_eval import compute_metrics
from .egael import edge_audit, edge_deletion_sweep
from .graph import dump_edges
from .hsi_io import load_cube, load_labels, write_cube, write_labels
from .superpixel import export_segmentation, import_segmentation
from .synth import SynthSpec, generate
from .train import (
    RunConfig,
    ablation_table_csv,
    preprocess,
    run_ablation,
    run_training,
)


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file; flags override it")
    parser.add_argument("--classes", type=int, dest="n_classes")
    parser.add_argument("--pca-dim", type=int, dest="pca_dim")
    parser.add_argument("--superpixels", type=int)
    parser.add_argument("--layers", type=int)
    parser.add_argument("--variant")
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--weight-decay", type=float, dest="weight_decay")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--egael-mode", dest="egael_mode",
                        choices=["full", "w_pre", "w_emp", "off"])
    parser.add_argument("--no-end-to-end", action="store_const", const=False,
                        dest="egael_end_to_end")


def _config_dict(args: argparse.Namespace) -> dict:
    data = {}
    if args.config:
        data.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    for key in ("n_classes", "pca_dim", "superpixels", "layers", "variant", "alpha",
                "beta", "gamma", "sigma", "tau", "lr", "weight_decay", "epochs",
                "seed", "egael_mode", "egael_end_to_end"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    return data


def _build_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig.from_dict(_config_dict(args))


def cmd_synth(args) -> int:
    spec = SynthSpec(height=args.height, width=args.width, bands=args.bands,
                     classes=args.classes, regions=args.regions,
                     noise_std=args.noise_std, holdout_fraction=args.holdout,
                     seed=args.seed)
    cube, labels = generate(spec)
    write_cube(args.cube, cube)
    write_labels(args.labels, labels)
    manifest = {"spec": spec.__dict__, "cube": str(args.cube), "labels": str(args.labels)}
    print(json.dumps(manifest, indent=2))
    return 0


def cmd_preprocess(args) -> int:
    cube = load_cube(args.cube)
    prep = preprocess(cube, args.pca_dim, args.superpixels, args.seed)
    export_segmentation(args.segmentation, prep.sp.assignment)
    if args.edges:
        dump_edges(args.edges, prep.graph)
    print(json.dumps({"superpixels": prep.sp.m, "edges": prep.graph.n_edges,
                      "segmentation": str(args.segmentation)}, indent=2))
    return 0


def cmd_train(args) -> int:
    data = _config_dict(args)
    cube = load_cube(args.cube)
    labels = load_labels(args.labels) if args.labels else None
    if labels is not None and "n_classes" not in data:
        data["n_classes"] = labels.classes
    cfg = RunConfig.from_dict(data)
    segmentation = import_segmentation(args.segmentation, (cube.height, cube.width)) \
        if args.segmentation else None
    result = run_training(cfg, cube, labels, out_dir=args.out, segmentation=segmentation)
    if result.report is not None:
        print(result.report.to_json())
    if result.run_dir is not None:
        print(f"run directory: {result.run_dir}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    pred = load_labels(args.pred)
    gt = load_labels(args.gt)
    # class ids are 1-based; pixels the prediction left at 0 become one extra
    # cluster so they count against accuracy instead of wrapping around
    k = max(pred.classes, gt.classes)
    pred_idx = np.where(pred.labels > 0, pred.labels - 1, k)
    k_total = k + 1 if (pred.labels == 0).any() else k
    report = compute_metrics(pred_idx, gt, k=k_total)
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    cube = load_cube(args.cube)
    labels = load_labels(args.labels)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    variants = args.variants.split(",") if args.variants else None
    rows = run_ablation(cfg, cube, labels, variants=variants,
                        egael_rows=args.egael, seeds=seeds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2), encoding="utf-8")
    (out_dir / "ablation.csv").write_text(ablation_table_csv(rows), encoding="utf-8")
    print(ablation_table_csv(rows))
    return 0


def cmd_edge_audit(args) -> int:
    state_path = Path(args.run_dir) / "edge_state.json"
    if not state_path.exists():
        print(f"no edge_state.json under {args.run_dir} (train with EGAEL and labels)",
              file=sys.stderr)
        return 1
    state = json.loads(state_path.read_text(encoding="utf-8"))
    report = edge_audit(np.array(state["w_pre"]),
                        np.array(state["sp_gt_labels"]),
                        np.array(state["edges"]))
    out = Path(args.run_dir) / "edge_audit.json"
    out.write_text(report.to_json(), encoding="utf-8")
    print(report.to_json())
    return 0


def cmd_edge_sweep(args) -> int:
    cfg = _build_config(args)
    cube = load_cube(args.cube)
    labels = load_labels(args.labels)
    ratios = [float(r) for r in args.ratios.split(",")]
    results = []
    for ratio in ratios:
        def transform(graph, sp_gt, rng, _r=ratio):
            (_, modified), = edge_deletion_sweep(graph, sp_gt, [_r], rng)
            return modified

        result = run_training(cfg, cube, labels, graph_transform=transform)
        results.append({"ratio": ratio, "acc": result.report.acc,
                        "nmi": result.report.nmi, "ari": result.report.ari})
        print(f"ratio {ratio}: acc {result.report.acc:.4f}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "edge_sweep.json").write_text(json.dumps(results, indent=2), encoding="utf-8")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hsiclust",
                                     description="Hyperspectral superpixel clustering")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--regions", type=int, default=8)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--holdout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="standardize, reduce, segment, build graph")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--segmentation", type=Path, required=True)
    p.add_argument("--edges", type=Path)
    p.add_argument("--pca-dim", type=int, default=20, dest="pca_dim")
    p.add_argument("--superpixels", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run the full training loop")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--segmentation", type=Path, help="imported segmentation raster")
    p.add_argument("--out", type=Path, help="run directory for artifacts")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for a predicted label raster")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="variant or edge-learning ablation grid")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variants", help="comma-separated variant list")
    p.add_argument("--egael", action="store_true", help="run the edge-learning rows")
    p.add_argument("--seeds", help="comma-separated seeds")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("edge-audit", help="threshold audit of predicted edge weights")
    p.add_argument("--run-dir", type=Path, required=True, dest="run_dir")
    p.set_defaults(func=cmd_edge_audit)

    p = sub.add_parser("edge-sweep", help="train on graphs with incorrect edges deleted")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ratios", default="0,1")
    _add_config_arguments(p)
    p.set_defaults(func=cmd_edge_sweep)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
