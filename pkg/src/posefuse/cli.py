"""Command-line driver.

Subcommands::

    gen-data    write a synthetic dataset directory
    train       train one model (fresh backbone or an existing model file)
    fuse-early  sew two models' top dense layers together (add / multiply)
    predict     per-sample predictions of one or more models, optionally fused
    evaluate    metrics table (and trajectory SVG) from a predictions file
    pipeline    the full experiment from a config file

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
``POSEFUSE_THREADS`` caps the worker threads used for member inference.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from .config import ExperimentConfig, load_config
from .errors import LineageMismatch, NumericalError, ValidationError
from .evaluation import (
    improvement_table,
    metrics_report,
    render_improvements,
    render_report,
    trajectory_svg,
)
from .fusion import (
    FusionOp,
    early_fuse_weights,
    hlff_from_predictions,
    late_fuse,
    predict_members,
    sew_into_models,
)
from .nn.model import build_model
from .nn.serialization import load_model, save_model
from .nn.training import TrainConfig, TrainingData, train
from .pipeline import (
    StageError,
    format_predictions,
    parse_predictions,
    preprocessing_metadata,
    run_pipeline,
    stats_from_metadata,
    to_metric,
    worker_count,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("posefuse")


# ------------------------------------------------------------------ helpers

def _dataset(path) -> D.Dataset:
    root = Path(path)
    if not (root / "poses.txt").exists():
        raise ValidationError(f"dataset not found (no poses.txt): {root}")
    return D.load_dataset(root)


def _select(records, split: str, seed: int):
    if split == "all":
        return list(records)
    s = D.split_dataset(records, seed)
    return s.train if split == "train" else s.test


def _write_history(path, history) -> None:
    Path(path).write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history)))


# --------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    manifest = D.write_synthetic_dataset(args.out, args.seed, args.n)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _dataset(args.dataset)
    train_records = _select(ds.records, "train", args.split_seed)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, dropout_rate=args.dropout,
                      epochs=args.epochs, seed=args.seed, norm=args.norm)
    if args.init:
        model = load_model(args.init)
        if not model.preprocessing:
            raise ValidationError(f"{args.init} carries no preprocessing statistics")
        stats, image_stats = stats_from_metadata(model.preprocessing)
        convention = model.preprocessing["convention"]
        formula = model.preprocessing["rotation_formula"]
    else:
        kw = {"dropout_rate": args.dropout}
        if args.feature_dim:
            kw["feature_dim"] = args.feature_dim
        if args.pool_window:
            kw["pool_window"] = args.pool_window
        model = build_model(args.backbone, seed=args.seed, **kw)
        stats = D.compute_normalization(train_records)
        refs = [r.image_ref for r in train_records]
        image_stats = D.compute_image_stats(ds.images(r) for r in refs)
        convention, formula = args.convention, args.rotation_formula
        model.preprocessing = preprocessing_metadata(stats, image_stats, convention, formula)

    refs = [r.image_ref for r in train_records]
    feats = np.concatenate([model.backbone.trunk_forward(b) for b in ds.images.batches(refs, image_stats)])
    if not args.init:
        model.backbone.calibrate(feats)
    targets = D.pose_targets(train_records, stats, convention, formula)
    trained, history = train(model, TrainingData(targets, trunk_features=feats), cfg)
    if model.lineage.get("stage") == "early":
        trained.lineage = dict(model.lineage, retrained_epochs=cfg.epochs)
    save_model(trained, args.out)
    hist_path = args.history or str(Path(args.out).with_suffix(".history.csv"))
    _write_history(hist_path, history)
    print(args.out)
    return EXIT_OK


def cmd_fuse_early(args) -> int:
    a, b = load_model(args.model_a), load_model(args.model_b)
    fused = early_fuse_weights(a.backbone.top_dense, b.backbone.top_dense, args.op)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sewn in sew_into_models(a, b, fused, args.op):
        path = out / f"{sewn.name}.pfm"
        save_model(sewn, path)
        print(path)
    return EXIT_OK


HYBRIDS = {"ahl": (FusionOp.ADD, 2), "mhl": (FusionOp.MULTIPLY, 2), "hlff": (None, 4)}


def _check_hybrid_lineage(models, kind: str) -> None:
    op, count = HYBRIDS[kind]
    if len(models) != count:
        raise ValidationError(f"{kind.upper()} needs exactly {count} models, got {len(models)}")
    expected = [op] * count if op is not None else [FusionOp.ADD, FusionOp.ADD,
                                                      FusionOp.MULTIPLY, FusionOp.MULTIPLY]
    for m, want in zip(models, expected):
        if m.lineage.get("stage") != "early" or m.lineage.get("op") != want.value:
            raise LineageMismatch(f"{kind.upper()} member {m.name} has lineage "
                                  f"{m.lineage.get('tag', 'none')}, expected {want.value}-sewn")


def cmd_predict(args) -> int:
    models = [load_model(p) for p in args.model]
    metas = [m.preprocessing for m in models]
    if not metas[0]:
        raise ValidationError(f"{args.model[0]} carries no preprocessing statistics")
    if any(meta != metas[0] for meta in metas[1:]):
        raise ValidationError("models were trained with different normalization statistics")
    stats, image_stats = stats_from_metadata(metas[0])
    ds = _dataset(args.dataset)
    records = _select(ds.records, args.split, args.split_seed)
    refs = [r.image_ref for r in records]

    threads = worker_count()
    chunks = [predict_members(models, b, threads) for b in ds.images.batches(refs, image_stats)]
    members = np.concatenate(chunks, axis=1)
    names = [m.name or Path(p).stem for m, p in zip(models, args.model)]
    preds = {n: to_metric(members[i], stats) for i, n in enumerate(names)}

    fusion = args.fusion
    if fusion == "auto":
        fusion = "average" if len(models) >= 2 else "none"
    if fusion != "none":
        if len(models) < 2:
            raise ValidationError("fusion needs at least two models")
        if fusion in ("ahl", "mhl"):
            _check_hybrid_lineage(models, fusion)
            fused = late_fuse(members, FusionOp.MULTIPLY if fusion == "mhl" else FusionOp.AVERAGE)
        elif fusion == "hlff":
            _check_hybrid_lineage(models, fusion)
            fused = hlff_from_predictions(members, args.hlff_variant).pose
        else:
            fused = late_fuse(members, FusionOp.parse(fusion))
        preds[args.fused_name or fusion.upper()] = to_metric(fused, stats)

    text = format_predictions(refs, preds)
    if args.out:
        Path(args.out).write_text(text)
        print(args.out)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    refs, preds = parse_predictions(Path(args.predictions).read_text())
    gt_records = {r.image_ref: r for r in D.load_pose_file(args.ground_truth)}
    missing = [r for r in refs if r not in gt_records]
    if missing:
        raise ValidationError(f"no ground truth for {len(missing)} predicted samples, e.g. {missing[0]}")
    gt = D.raw_poses([gt_records[r] for r in refs], args.convention)
    reports = [metrics_report(name, p, gt) for name, p in preds.items()]
    text = render_report(reports, args.format)
    if args.baseline:
        base = next((r for r in reports if r.model == args.baseline), None)
        if base is None:
            raise ValidationError(f"baseline {args.baseline!r} not among {list(preds)}")
        text += "\n" + render_improvements(
            improvement_table(base, [r for r in reports if r.model != args.baseline]), args.format)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if args.svg:
        shown = args.svg_models.split(",") if args.svg_models else list(preds)
        Path(args.svg).write_text(trajectory_svg(gt[:, [0, 2]], {n: preds[n][:, [0, 2]] for n in shown}))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.baseline:
        cfg.baseline = args.baseline
    if args.epochs is not None:
        cfg.train = TrainConfig(**{**cfg.train.to_dict(), "epochs": args.epochs})
    if args.n is not None:
        cfg.n = args.n
    if args.no_timing:
        cfg.timing = False
    result = run_pipeline(cfg)
    sys.stdout.write(render_report(result.reports, "markdown"))
    sys.stdout.write("\n" + render_improvements(result.improvements, "markdown"))
    print(f"\nmanifest: {result.output_dir / 'manifest.json'}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posefuse", description="Pose-regression fusion experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=600)
    g.add_argument("--out", default="data/synthetic")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on the training split")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--backbone", default="A", help="stand-in backbone id (A-E)")
    t.add_argument("--init", help="continue from this model file (e.g. a sewn model) instead")
    t.add_argument("--history", help="loss history CSV (default: next to the model)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--batch-size", type=int, default=34)
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--norm", choices=("l1", "l2"), default="l1")
    t.add_argument("--feature-dim", type=int)
    t.add_argument("--pool-window", type=int)
    t.add_argument("--convention", choices=("zyx", "xyz"), default="zyx")
    t.add_argument("--rotation-formula", choices=("standard", "paper"), default="standard")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse-early", help="sew two models' top dense layers")
    f.add_argument("--model-a", required=True)
    f.add_argument("--model-b", required=True)
    f.add_argument("--op", choices=("add", "multiply"), required=True)
    f.add_argument("--out-dir", default=".")
    f.set_defaults(func=cmd_fuse_early)

    pr = sub.add_parser("predict", help="predict poses with one or more models")
    pr.add_argument("--model", nargs="+", required=True)
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--split", choices=("test", "train", "all"), default="test")
    pr.add_argument("--split-seed", type=int, default=0)
    pr.add_argument("--fusion", default="auto",
                    choices=("auto", "none", "average", "multiply", "ahl", "mhl", "hlff"))
    pr.add_argument("--hlff-variant", choices=("four", "hybrids"), default="four")
    pr.add_argument("--fused-name", help="model name for the fused column")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="metrics from a predictions file")
    e.add_argument("--predictions", required=True)
    e.add_argument("--ground-truth", required=True, help="pose file covering the predicted refs")
    e.add_argument("--convention", choices=("zyx", "xyz"), default="zyx")
    e.add_argument("--format", choices=("csv", "markdown"), default="csv")
    e.add_argument("--baseline")
    e.add_argument("--out")
    e.add_argument("--svg", help="write an x-z trajectory overlay")
    e.add_argument("--svg-models", help="comma-separated models to draw (default: all)")
    e.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("pipeline", help="run the full experiment")
    pl.add_argument("--config")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--output-dir")
    pl.add_argument("--baseline")
    pl.add_argument("--epochs", type=int)
    pl.add_argument("--n", type=int)
    pl.add_argument("--no-timing", action="store_true", help="skip MAPST measurement")
    pl.set_defaults(func=cmd_pipeline)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (ValidationError, FileNotFoundError)):
        return EXIT_VALIDATION
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, NumericalError, StageError, OSError) as exc:
        print(f"posefuse {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
