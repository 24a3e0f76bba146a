"""Command-line surface for the full pipeline.

Subcommands: gen-data, make-anomalies, train, evaluate, hqc, export-map.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from cfad import data as data_io
from cfad.config import ConfigError, load_run_config, write_resolved_config
from cfad.dagen import generate_anomalies
from cfad.geometry import normalize_cloud
from cfad.metrics import evaluate, network_scorer
from cfad.network import load_checkpoint
from cfad.scoring import HqcConfig, ScoreResult, hqc_run, score_cloud
from cfad.training import NonFiniteLossError, default_lr, train as run_training

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class DataError(RuntimeError):
    pass


def _apply_thread_cap():
    cap = os.environ.get("MC4AD_NUM_THREADS")
    if cap:
        import torch

        torch.set_num_threads(max(1, int(cap)))


def _load_net(path, what):
    if not Path(path).is_file():
        raise DataError(f"{what} checkpoint not found: {path}")
    return load_checkpoint(path)[0]


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args):
    cfg = load_run_config(args.config)
    out = Path(args.out)
    write_resolved_config(cfg, out)
    manifest = data_io.synthesize_dataset(cfg.synth, out)
    print(f"wrote dataset with {len(manifest['classes'])} classes under {out}")


def cmd_make_anomalies(args):
    cfg = load_run_config(args.config)
    if not Path(args.cloud).is_file():
        raise DataError(f"cloud file not found: {args.cloud}")
    cloud = normalize_cloud(data_io.load_cloud(args.cloud))
    out = Path(args.out)
    write_resolved_config(cfg, out)
    sample = generate_anomalies(cloud, cfg.dagen)
    data_io.save_cloud(out / "perturbed.xyz", sample.perturbed)
    data_io.save_mask(out / "mask.txt", sample.mask)
    np.savetxt(out / "displacement.txt", sample.displacement, fmt="%.9g")
    print(f"perturbed {int(sample.mask.sum())} of {len(cloud)} points")


def cmd_train(args):
    overrides = {}
    if args.pruned:
        overrides["network"] = {"variant": "pruned"}
    cfg = load_run_config(args.config, overrides)
    if args.pruned and "train" not in overrides:
        cfg = replace(cfg, train=replace(cfg.train, lr_initial=default_lr("pruned")))
    root = Path(args.data)
    if not root.is_dir():
        raise DataError(f"data directory not found: {root}")
    out = Path(args.out)
    write_resolved_config(cfg, out)

    clouds = []
    for cls in data_io.list_classes(root):
        clouds.extend(data_io.load_train_clouds(root, cls))
    net, start_epoch = None, 0
    if args.resume:
        net, step = load_checkpoint(args.resume)
        start_epoch = step  # one optimizer step per accumulated batch
    try:
        run_training(clouds, cfg.network, cfg.dagen, cfg.loss, cfg.train,
                     out_dir=out, net=net, start_epoch=start_epoch)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(EXIT_NUMERICAL)
    print(f"trained {cfg.network.variant} model for {cfg.train.epochs} epochs -> {out}")


def cmd_evaluate(args):
    cfg = load_run_config(args.config)
    root = Path(args.data)
    if not root.is_dir():
        raise DataError(f"data directory not found: {root}")
    out = Path(args.out)
    write_resolved_config(cfg, out)
    test_set = data_io.load_test_set(root)
    if args.oracle_scores:
        def scorer(cloud):
            labels = cloud.point_labels
            scores = (labels.astype(float) if labels is not None
                      else np.zeros(len(cloud)))
            from cfad.network import ForcePrediction
            zeros = np.zeros((len(cloud), 3))
            return ScoreResult(scores, float(scores.max()), ForcePrediction(zeros, zeros))
        # oracle uses ground-truth masks as point scores
        test_set = {
            cls: [(replace_labels(c, m), lab, m) for c, lab, m in items]
            for cls, items in test_set.items()
        }
    else:
        if args.checkpoint is None:
            raise ConfigError("evaluate requires --checkpoint unless --oracle-scores")
        scorer = network_scorer(_load_net(args.checkpoint, "model"))
    result = evaluate(scorer, test_set)
    result.write_csv(out / "metrics.csv")
    print(f"O-AUROC={result.o_auroc} P-AUROC={result.p_auroc} "
          f"O-AUPR={result.o_aupr} P-AUPR={result.p_aupr} FPS={result.fps:.2f}")


def replace_labels(cloud, mask):
    out = cloud.copy()
    out.point_labels = None if mask is None else np.asarray(mask)
    return out


def cmd_hqc(args):
    cfg = load_run_config(args.config, {"hqc": {"b": args.b}} if args.b is not None else None)
    root = Path(args.data)
    if not root.is_dir():
        raise DataError(f"data directory not found: {root}")
    out = Path(args.out)
    write_resolved_config(cfg, out)
    pruned = _load_net(args.pruned_ckpt, "pruned")
    full = _load_net(args.full_ckpt, "full")
    samples = []
    for cls, items in data_io.load_test_set(root).items():
        samples.extend(c for c, _, _ in items)
    report = hqc_run(samples, pruned, full, cfg.hqc)
    with open(out / "hqc_report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "pruned_score", "stage", "final_score"])
        for rec in report.records:
            writer.writerow([rec.sample_id, rec.pruned_score, rec.stage,
                             rec.final_object_score])
    (out / "hqc_summary.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    print(f"screened {report.n_samples} samples: {report.bypass_count} bypassed, "
          f"{report.n_samples - report.bypass_count} rescored "
          f"({report.fps:.2f} samples/s)")


def cmd_export_map(args):
    if not Path(args.cloud).is_file():
        raise DataError(f"cloud file not found: {args.cloud}")
    net = _load_net(args.checkpoint, "model")
    cloud = normalize_cloud(data_io.load_cloud(args.cloud))
    result = score_cloud(net, cloud)
    scores = result.point_scores
    p99 = np.percentile(scores, 99)
    red = np.minimum(scores / p99, 1.0) if p99 > 0 else np.zeros_like(scores)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             "end_header"]
    for p, r in zip(cloud.points, red):
        r8 = int(round(255 * r))
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {r8} 0 {255 - r8}")
    (out / "anomaly_map.ply").write_text("\n".join(lines) + "\n")
    np.savetxt(out / "point_scores.txt", scores, fmt="%.9g")
    print(f"wrote anomaly map for {len(cloud)} points (object score {result.object_score:.4g})")


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfad",
        description="Corrective-force 3D point-cloud anomaly detection pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset tree")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("make-anomalies", help="inject pseudo-anomalies into one cloud")
    p.add_argument("--config", default=None)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_anomalies)

    p = sub.add_parser("train", help="train the force-prediction network")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pruned", action="store_true")
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute detection metrics on a test set")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-scores", action="store_true",
                   help="debug: score with ground-truth masks instead of a model")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("hqc", help="two-stage hierarchical quality control")
    p.add_argument("--config", default=None)
    p.add_argument("--pruned-ckpt", required=True)
    p.add_argument("--full-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--b", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hqc)

    p = sub.add_parser("export-map", help="export a colored anomaly heat map PLY")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_map)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
