"""Early fusion (weight sewing), late fusion of predicted poses, and hybrid learners.

Early fusion combines the top dense layers of two backbones elementwise and
writes the result back into both models, which are then retrained.  Late
fusion combines the 7-vector predictions of several models.  The hybrids:

* AHL   average of the two additively sewn models
* MHL   elementwise product of the two multiplicatively sewn models
* HLFF  average of all four sewn models
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry as geo
from .errors import DegenerateQuaternion, EmptyEnsemble, LineageMismatch, ShapeMismatch, ValidationError
from .nn.layers import Dense
from .nn.model import PoseNetModel
from .nn.training import TrainConfig, TrainingData, train

DEGENERATE_NORM = 1e-9


class FusionOp(str, enum.Enum):
    ADD = "add"
    MULTIPLY = "multiply"
    AVERAGE = "average"

    @classmethod
    def parse(cls, value) -> "FusionOp":
        if isinstance(value, cls):
            return value
        aliases = {"mul": "multiply", "avg": "average", "mean": "average", "sum": "add"}
        v = str(value).lower()
        return cls(aliases.get(v, v))


EARLY_OPS = (FusionOp.ADD, FusionOp.MULTIPLY)
LATE_OPS = (FusionOp.AVERAGE, FusionOp.MULTIPLY)

# lineage tags written into sewn models
LINEAGE_TAG = {FusionOp.ADD: "AEF", FusionOp.MULTIPLY: "MEF"}


@dataclass(frozen=True)
class FusionSpec:
    stage: str
    op: FusionOp
    members: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "op", FusionOp.parse(self.op))
        object.__setattr__(self, "members", tuple(self.members))
        if self.stage not in ("early", "late", "hybrid"):
            raise ValidationError(f"stage must be early, late or hybrid, got {self.stage!r}")
        if self.stage == "early":
            if self.op not in EARLY_OPS:
                raise ValidationError(f"early fusion supports add or multiply, not {self.op.value}")
            if len(self.members) != 2:
                raise ValidationError("early fusion needs exactly two members")
        if self.stage == "late" and self.op not in LATE_OPS:
            raise ValidationError(f"late fusion supports average or multiply, not {self.op.value}")


@dataclass(frozen=True)
class FusedPrediction:
    """Fused (N, 7) poses plus the (M, N, 7) member predictions that produced them."""

    pose: np.ndarray
    members: np.ndarray
    op: FusionOp


# ------------------------------------------------------------ early fusion

def early_fuse_weights(a: Dense, b: Dense, op) -> Dense:
    """Elementwise sum or product of two dense layers (weights and biases)."""
    op = FusionOp.parse(op)
    if op not in EARLY_OPS:
        raise ValidationError(f"early fusion supports add or multiply, not {op.value}")
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot fuse dense layers of shape {a.shape} and {b.shape}")
    fused = Dense(a.in_features, a.out_features)
    for k in ("weight", "bias"):
        fused.params[k] = a.params[k] + b.params[k] if op is FusionOp.ADD else a.params[k] * b.params[k]
    fused.zero_grad()
    fused.fusion_op = op
    return fused


def sew_into_models(model_a: PoseNetModel, model_b: PoseNetModel, fused: Dense, op=None):
    """Copies of both models whose top dense layer holds the fused values.

    Everything else is copied unchanged; the inputs are not modified.
    """
    op = FusionOp.parse(op if op is not None else getattr(fused, "fusion_op", FusionOp.ADD))
    out = []
    for model, partner in ((model_a, model_b), (model_b, model_a)):
        if model.backbone.top_dense.shape != fused.shape:
            raise ShapeMismatch(
                f"fused layer {fused.shape} does not match {model.name} top dense "
                f"{model.backbone.top_dense.shape}")
        sewn = model.copy()
        for k in ("weight", "bias"):
            sewn.backbone.top_dense.params[k] = fused.params[k].copy()
        tag = LINEAGE_TAG[op]
        sewn.lineage = {"stage": "early", "op": op.value, "tag": tag,
                        "backbone": model.backbone.identifier,
                        "partner": partner.backbone.identifier}
        sewn.name = f"{tag}{model.backbone.identifier}"
        out.append(sewn)
    return tuple(out)


def retrain_after_sewing(model: PoseNetModel, data: TrainingData, config: TrainConfig):
    """Train the regressor of a sewn model; returns ``(model, history)`` with lineage kept."""
    if model.lineage.get("stage") != "early":
        raise LineageMismatch(f"{model.name or 'model'} carries no early-fusion lineage")
    trained, history = train(model, data, config)
    trained.lineage = dict(model.lineage, retrained_epochs=config.epochs)
    return trained, history


# ------------------------------------------------------------- late fusion

def _as_member_array(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        arr = poses.astype(float)
    else:
        poses = list(poses)
        arr = np.array([p.as_array() if isinstance(p, geo.Pose) else np.asarray(p, dtype=float)
                        for p in poses])
    if arr.ndim == 2:
        arr = arr[:, None, :]
    if arr.ndim != 3 or arr.shape[-1] != 7:
        raise ShapeMismatch(f"member predictions must be (M, N, 7), got {arr.shape}")
    return arr


def late_fuse(members, op=FusionOp.AVERAGE, geometric_translation: bool = False) -> np.ndarray:
    """Fuse (M, N, 7) member predictions into (N, 7).

    Translations are combined elementwise (mean or product).  Quaternions are
    sign-aligned to the first member, combined elementwise, then renormalized.
    With ``geometric_translation`` a multiplicative fusion takes the signed
    geometric mean of the translations instead of their raw product, which
    keeps the result in the members' units.
    """
    op = FusionOp.parse(op)
    if op not in LATE_OPS:
        raise ValidationError(f"late fusion supports average or multiply, not {op.value}")
    arr = _as_member_array(members)
    if arr.shape[0] < 2:
        raise EmptyEnsemble(f"late fusion needs at least 2 members, got {arr.shape[0]}")
    t, q = arr[:, :, :3], arr[:, :, 3:]
    q = geo.sign_align(q[0][None], q)
    if op is FusionOp.AVERAGE:
        # sequential sum in member order keeps the reduction reproducible
        t_f, q_f = t[0].copy(), q[0].copy()
        for i in range(1, len(arr)):
            t_f += t[i]
            q_f += q[i]
        t_f /= len(arr)
        q_f /= len(arr)
    else:
        t_f, q_f = t[0].copy(), q[0].copy()
        for i in range(1, len(arr)):
            t_f *= t[i]
            q_f *= q[i]
        if geometric_translation:
            t_f = signed_geometric_mean(t)
    n = np.linalg.norm(q_f, axis=1, keepdims=True)
    if np.any(n < DEGENERATE_NORM):
        bad = int(np.flatnonzero(n[:, 0] < DEGENERATE_NORM)[0])
        raise DegenerateQuaternion(f"fused quaternion of sample {bad} has norm {n[bad, 0]:.3e}")
    return np.concatenate([t_f, q_f / n], axis=1)


def late_fuse_poses(poses: Sequence, op=FusionOp.AVERAGE) -> geo.Pose:
    """Fuse single-sample poses (``Pose`` objects or 7-vectors) into one ``Pose``."""
    arr = _as_member_array(list(poses))
    if arr.shape[1] != 1:
        raise ShapeMismatch("late_fuse_poses takes one pose per member; use late_fuse for batches")
    return geo.Pose.from_array(late_fuse(arr, op)[0])


# ----------------------------------------------------------------- hybrids

def predict_members(models: Sequence[PoseNetModel], batch: np.ndarray, threads: int = 1) -> np.ndarray:
    """(M, N, 7) eval-mode predictions, in member order."""
    if threads > 1 and len(models) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(lambda m: m.forward(batch, mode="eval"), models))
    else:
        preds = [m.forward(batch, mode="eval") for m in models]
    return np.stack(preds)


def _fuse_models(models, batch, op, threads=1) -> FusedPrediction:
    if len(models) < 2:
        raise EmptyEnsemble(f"fusion needs at least 2 models, got {len(models)}")
    members = predict_members(models, batch, threads)
    return FusedPrediction(late_fuse(members, op), members, FusionOp.parse(op))


def _require_lineage(models, op: FusionOp, label: str) -> None:
    for m in models:
        if m.lineage.get("stage") != "early" or m.lineage.get("op") != op.value:
            raise LineageMismatch(
                f"{label} needs {LINEAGE_TAG[op]} members; {m.name or 'model'} has lineage "
                f"{m.lineage.get('tag', 'none')}")


def build_lf(models: Sequence[PoseNetModel], batch, threads: int = 1) -> FusedPrediction:
    """Late fusion: average of independently trained unimodal models."""
    return _fuse_models(list(models), batch, FusionOp.AVERAGE, threads)


def build_ahl(aef_a: PoseNetModel, aef_b: PoseNetModel, batch, threads: int = 1) -> FusedPrediction:
    _require_lineage((aef_a, aef_b), FusionOp.ADD, "AHL")
    return _fuse_models([aef_a, aef_b], batch, FusionOp.AVERAGE, threads)


def build_mhl(mef_a: PoseNetModel, mef_b: PoseNetModel, batch, threads: int = 1) -> FusedPrediction:
    _require_lineage((mef_a, mef_b), FusionOp.MULTIPLY, "MHL")
    return _fuse_models([mef_a, mef_b], batch, FusionOp.MULTIPLY, threads)


def build_hlff(aef_a, aef_b, mef_a, mef_b, batch, variant: str = "four", threads: int = 1) -> FusedPrediction:
    """Full hybrid.

    ``variant="four"`` averages the four sewn models' raw predictions;
    ``variant="hybrids"`` averages the AHL and MHL outputs instead.
    """
    _require_lineage((aef_a, aef_b), FusionOp.ADD, "HLFF")
    _require_lineage((mef_a, mef_b), FusionOp.MULTIPLY, "HLFF")
    if variant == "four":
        return _fuse_models([aef_a, aef_b, mef_a, mef_b], batch, FusionOp.AVERAGE, threads)
    if variant == "hybrids":
        return hlff_from_predictions(predict_members([aef_a, aef_b, mef_a, mef_b], batch, threads),
                                     variant="hybrids")
    raise ValidationError(f"HLFF variant must be 'four' or 'hybrids', got {variant!r}")


def hlff_from_predictions(members: np.ndarray, variant: str = "four") -> FusedPrediction:
    """HLFF from (4, N, 7) predictions ordered AEF_a, AEF_b, MEF_a, MEF_b."""
    members = _as_member_array(members)
    if members.shape[0] != 4:
        raise EmptyEnsemble(f"HLFF needs exactly 4 members, got {members.shape[0]}")
    if variant == "four":
        return FusedPrediction(late_fuse(members, FusionOp.AVERAGE), members, FusionOp.AVERAGE)
    ahl = late_fuse(members[:2], FusionOp.AVERAGE)
    mhl = late_fuse(members[2:], FusionOp.MULTIPLY)
    return FusedPrediction(late_fuse(np.stack([ahl, mhl]), FusionOp.AVERAGE), members, FusionOp.AVERAGE)


def signed_geometric_mean(values: np.ndarray) -> np.ndarray:
    """Alternative multiplicative translation fusion: sign(prod) * |prod|^(1/M)."""
    values = np.asarray(values, dtype=float)
    prod = np.prod(values, axis=0)
    return np.sign(prod) * np.abs(prod) ** (1.0 / values.shape[0])
