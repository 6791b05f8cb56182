"""End-to-end experiment: unimodal, late-fusion, early-fusion and hybrid models.

Stages, in order: dataset -> split/statistics -> trunk features -> unimodal
training -> weight sewing + retraining -> test predictions -> fusion ->
metrics/timing -> reports.  Trunk features are cached per backbone because
the feature extractors are frozen; sewn models reuse their source trunk.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from .config import ExperimentConfig
from .errors import ValidationError
from .evaluation import (
    MetricsReport,
    improvement_table,
    measure_mapst,
    metrics_report,
    render_improvements,
    render_report,
    trajectory_svg,
)
from .fusion import FusionOp, early_fuse_weights, hlff_from_predictions, late_fuse, sew_into_models
from .nn.model import PoseNetModel, build_model
from .nn.serialization import save_model
from .nn.training import TrainingData, train

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("POSEFUSE_THREADS", "1")))
    except ValueError:
        return 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def preprocessing_metadata(stats: D.NormalizationStats, image_stats: D.ImageStats,
                           convention: str, formula: str) -> dict:
    return {"translation": stats.to_dict(),
            "image_mean": [float(v) for v in image_stats.mean],
            "image_std": [float(v) for v in image_stats.std],
            "convention": convention, "rotation_formula": formula}


def stats_from_metadata(meta: dict) -> tuple[D.NormalizationStats, D.ImageStats]:
    return (D.NormalizationStats.from_dict(meta["translation"]),
            D.ImageStats(np.asarray(meta["image_mean"]), np.asarray(meta["image_std"])))


def to_metric(pred: np.ndarray, stats: D.NormalizationStats) -> np.ndarray:
    """Normalized (N, 7) predictions -> translation in meters + unit quaternion."""
    out = np.array(pred, dtype=float, copy=True)
    out[:, :3] = D.denormalize_translation(out[:, :3], stats)
    return out


def format_predictions(refs, preds: dict[str, np.ndarray]) -> str:
    lines = ["image_ref,model,tx,ty,tz,qw,qx,qy,qz"]
    for name, arr in preds.items():
        for ref, row in zip(refs, arr):
            lines.append(",".join([ref, name, *(repr(float(v)) for v in row)]))
    return "\n".join(lines) + "\n"


def parse_predictions(text: str) -> tuple[list[str], dict[str, np.ndarray]]:
    refs: list[str] = []
    rows: dict[str, list] = {}
    seen: dict[str, list[str]] = {}
    for i, line in enumerate(text.splitlines()):
        if i == 0 or not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise ValidationError(f"predictions line {i + 1}: expected 9 fields")
        ref, name = parts[0], parts[1]
        rows.setdefault(name, []).append([float(v) for v in parts[2:]])
        seen.setdefault(name, []).append(ref)
    for name, r in seen.items():
        if not refs:
            refs = r
        elif r != refs:
            raise ValidationError(f"model {name} predicts a different sample list")
    return refs, {k: np.array(v) for k, v in rows.items()}


@dataclass
class PipelineResult:
    output_dir: Path
    reports: list[MetricsReport]
    improvements: list
    manifest: dict
    predictions: dict[str, np.ndarray] = field(default_factory=dict)
    histories: dict[str, list[float]] = field(default_factory=dict)
    models: dict[str, PoseNetModel] = field(default_factory=dict)


class _Stage:
    def __init__(self, timings: dict, name: str):
        self.timings, self.name = timings, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = round(time.perf_counter() - self.t0, 3)
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _model_kwargs(cfg: ExperimentConfig) -> dict:
    kw = {"dropout_rate": cfg.train.dropout_rate}
    if cfg.model.feature_dim is not None:
        kw["feature_dim"] = cfg.model.feature_dim
    if cfg.model.pool_window is not None:
        kw["pool_window"] = cfg.model.pool_window
    return kw


def run_pipeline(cfg: ExperimentConfig) -> PipelineResult:
    out = Path(cfg.output_dir)
    timings: dict[str, float] = {}
    threads = worker_count()

    with _Stage(timings, "dataset"):
        if cfg.dataset == "synthetic":
            if cfg.write_dataset:
                D.write_synthetic_dataset(out / "dataset", cfg.seed, cfg.n)
                dataset = D.load_dataset(out / "dataset")
            else:
                dataset = D.synthetic_dataset(cfg.seed, cfg.n)
        else:
            if not (Path(cfg.dataset) / "poses.txt").exists():
                raise ValidationError(f"dataset not found: {cfg.dataset}")
            dataset = D.load_dataset(cfg.dataset)

    with _Stage(timings, "split"):
        split = D.split_dataset(dataset.records, cfg.seed)
        stats = D.compute_normalization(split.train)
        train_refs = [r.image_ref for r in split.train]
        test_refs = [r.image_ref for r in split.test]
        image_stats = D.compute_image_stats(dataset.images(r) for r in train_refs)
        targets = D.pose_targets(split.train, stats, cfg.convention, cfg.rotation_formula)
        gt = D.raw_poses(split.test, cfg.convention)
        meta = preprocessing_metadata(stats, image_stats, cfg.convention, cfg.rotation_formula)

    a_id, b_id = cfg.model.early_pair
    backbone_ids = list(dict.fromkeys([a_id, b_id, *cfg.model.lf_members]))
    base_models = {bid: build_model(bid, seed=cfg.seed, **_model_kwargs(cfg)) for bid in backbone_ids}
    for m in base_models.values():
        m.preprocessing = meta

    with _Stage(timings, "train_features"):
        train_feats = {}
        for bid, m in base_models.items():
            train_feats[bid] = np.concatenate(
                [m.backbone.trunk_forward(b) for b in dataset.images.batches(train_refs, image_stats)])
            m.backbone.calibrate(train_feats[bid])
        training_accessed = set(dataset.images.accessed)

    models: dict[str, PoseNetModel] = {}
    histories: dict[str, list[float]] = {}
    with _Stage(timings, "train_unimodal"):
        for bid in backbone_ids:
            trained, hist = train(base_models[bid], TrainingData(targets, trunk_features=train_feats[bid]), cfg.train)
            models[f"unimodal{bid}"] = trained
            histories[f"unimodal{bid}"] = hist

    with _Stage(timings, "early_fusion"):
        # sew the frozen (pretrained) top dense layers of the pair, then retrain each regressor
        ma, mb = base_models[a_id], base_models[b_id]
        for op in (FusionOp.ADD, FusionOp.MULTIPLY):
            fused = early_fuse_weights(ma.backbone.top_dense, mb.backbone.top_dense, op)
            sewn_a, sewn_b = sew_into_models(ma, mb, fused, op)
            for sewn, bid in ((sewn_a, a_id), (sewn_b, b_id)):
                trained, hist = train(sewn, TrainingData(targets, trunk_features=train_feats[bid]), cfg.train)
                trained.lineage = dict(sewn.lineage, retrained_epochs=cfg.train.epochs)
                models[trained.name] = trained
                histories[trained.name] = hist
        training_accessed |= set(dataset.images.accessed)

    with _Stage(timings, "predict"):
        test_images = {}
        test_feats = {}
        for bid, m in base_models.items():
            test_feats[bid] = np.concatenate(
                [m.backbone.trunk_forward(b) for b in dataset.images.batches(test_refs, image_stats)])
        preds = {name: m.predict_from_trunk(test_feats[m.backbone.identifier]) for name, m in models.items()}
        # reference point for how much training helped: the same models before any training
        untrained = {f"unimodal{bid}": to_metric(base_models[bid].predict_from_trunk(test_feats[bid]), stats)
                     for bid in backbone_ids}
        n_time = min(len(test_refs), max(cfg.mapst_samples, 10))
        if cfg.timing:
            test_images = np.concatenate(list(dataset.images.batches(test_refs[:n_time], image_stats)))

    aef = [f"AEF{a_id}", f"AEF{b_id}"]
    mef = [f"MEF{a_id}", f"MEF{b_id}"]
    lf_names = [f"unimodal{b}" for b in cfg.model.lf_members]
    with _Stage(timings, "fusion"):
        preds["LF"] = late_fuse(np.stack([preds[n] for n in lf_names]), FusionOp.AVERAGE)
        preds["AHL"] = late_fuse(np.stack([preds[n] for n in aef]), FusionOp.AVERAGE)
        preds["MHL"] = late_fuse(np.stack([preds[n] for n in mef]), FusionOp.MULTIPLY)
        preds["HLFF"] = hlff_from_predictions(np.stack([preds[n] for n in aef + mef]), cfg.hlff_variant).pose
        for name, spec in cfg.fusions.items():
            preds[name] = _extra_fusion(spec, models, preds, test_refs, dataset, image_stats, stats)

    metric_preds = {k: to_metric(v, stats) for k, v in preds.items()}
    groups = {"LF": lf_names, "AHL": aef, "MHL": mef, "HLFF": aef + mef}

    with _Stage(timings, "metrics"):
        reports = []
        names = [f"unimodal{a_id}", f"unimodal{b_id}", "LF", *aef, *mef, "AHL", "MHL", "HLFF",
                 *cfg.fusions.keys()]
        for name in names:
            mapst = None
            if cfg.timing:
                mapst = _time_model(name, models, groups, cfg, test_images, threads)
            reports.append(metrics_report(name, metric_preds[name], gt, mapst))
        baseline = next((r for r in reports if r.model == cfg.baseline), None)
        if baseline is None:
            raise ValidationError(f"baseline {cfg.baseline!r} is not one of {[r.model for r in reports]}")
        improvements = improvement_table(baseline, [r for r in reports if r.model != cfg.baseline])

    with _Stage(timings, "write"):
        untrained_et = {k: metrics_report(k, v, gt).median_et for k, v in untrained.items()}
        manifest = _write_outputs(out, cfg, models, histories, reports, improvements, metric_preds,
                                  test_refs, gt, split, training_accessed, timings, untrained_et)

    return PipelineResult(out, reports, improvements, manifest, metric_preds, histories, models)


def _extra_fusion(spec, models, preds, test_refs, dataset, image_stats, stats):
    from .nn.serialization import load_model

    members = []
    for ref in spec.members:
        if ref in preds:
            members.append(preds[ref])
        elif Path(ref).exists():
            m = load_model(ref)
            batches = dataset.images.batches(test_refs, image_stats)
            members.append(np.concatenate([m.forward(b) for b in batches]))
        else:
            raise ValidationError(f"fusion member {ref!r} is neither a pipeline model nor a file")
    if spec.stage == "early":
        raise ValidationError("early-fusion specs are built by the pipeline itself; use late or hybrid")
    return late_fuse(np.stack(members), spec.op)


def _time_model(name, models, groups, cfg, images, threads) -> float:
    from .fusion import predict_members

    members = [models[n] for n in groups[name]] if name in groups else [models.get(name)]
    if any(m is None for m in members):
        return None
    op = FusionOp.MULTIPLY if name == "MHL" else FusionOp.AVERAGE

    def predict(batch):
        p = predict_members(members, batch, threads)
        return late_fuse(p, op) if len(members) > 1 else p[0]

    return measure_mapst(predict, images)


def _write_outputs(out: Path, cfg, models, histories, reports, improvements, metric_preds,
                   test_refs, gt, split, training_accessed, timings, untrained_et) -> dict:
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "history").mkdir(exist_ok=True)
    deterministic: list[Path] = []
    volatile: list[Path] = []

    for name, m in models.items():
        p = out / "models" / f"{name}.pfm"
        save_model(m, p)
        deterministic.append(p)
    for name, hist in histories.items():
        p = out / "history" / f"{name}.csv"
        p.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(hist)))
        deterministic.append(p)

    p = out / "predictions.csv"
    p.write_text(format_predictions(test_refs, metric_preds))
    deterministic.append(p)
    p = out / "ground_truth.txt"
    D.write_pose_file(split.test, p)
    deterministic.append(p)

    accuracy = [MetricsReport(r.model, r.median_et, r.mean_et, r.median_er, r.mean_er, None) for r in reports]
    for fname, text, bucket in (
        ("accuracy.csv", render_report(accuracy, "csv"), deterministic),
        ("report.csv", render_report(reports, "csv"), volatile if cfg.timing else deterministic),
        ("report.md", render_report(reports, "markdown"), volatile if cfg.timing else deterministic),
        ("improvements.csv", render_improvements(improvements, "csv"), volatile if cfg.timing else deterministic),
        ("improvements.md", render_improvements(improvements, "markdown"), volatile if cfg.timing else deterministic),
    ):
        (out / fname).write_text(text)
        bucket.append(out / fname)

    gt_xz = gt[:, [0, 2]]
    svg_names = [n for n in ("unimodal" + cfg.model.early_pair[0], "HLFF") if n in metric_preds]
    p = out / "trajectory.svg"
    p.write_text(trajectory_svg(gt_xz, {n: metric_preds[n][:, [0, 2]] for n in svg_names}))
    deterministic.append(p)

    test_set = set(test_refs)
    leaked = sorted(training_accessed & test_set)
    manifest = {
        "tool": "posefuse",
        "version": __version__,
        "platform": {"python": platform.python_version(), "numpy": np.__version__,
                     "machine": platform.machine()},
        "config": cfg.snapshot(),
        "split": {"seed": split.seed, "train": len(split.train), "test": len(split.test)},
        "audit": {"training_stage_images": len(training_accessed), "test_images_read_in_training": leaked},
        "checksums": {str(p.relative_to(out)): sha256_file(p) for p in deterministic},
        "volatile": {str(p.relative_to(out)): sha256_file(p) for p in volatile},
        "untrained_median_et_m": untrained_et,
        "timings_s": timings,
    }
    if leaked:
        raise ValidationError(f"test images read during training: {leaked[:5]}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
