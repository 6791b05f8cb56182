"""PoseNet-style model: frozen feature extractor + dropout/pool/dense pose regressor."""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import NaNGradient, ShapeMismatch, ValidationError
from .layers import AdaptiveAvgPool2d, AvgPool1d, Conv2d, Dense, Dropout, Flatten, ReLU, Sequential, Shift

INPUT_CHANNELS = 3
ADAPTER_GRID = 4
FEATURE_DIM = 1024
TOP_DENSE_GAIN = 0.7
POOL_WINDOW = 4
POSE_DIM = 7
S_X_INIT = 0.0
S_Q_INIT = -3.0

# Stand-in backbones.  "A" and "B" are the two early-fusion partners; C-E only
# widen the late-fusion ensemble.  All end in 32 channels so the adapter grid
# yields the same top-dense input width.
BACKBONES: dict[str, dict] = {
    "A": {"channels": [8, 16, 32], "kernel": 3},
    "B": {"channels": [8, 16, 24, 32], "kernel": 3},
    "C": {"channels": [12, 24, 32], "kernel": 3},
    "D": {"channels": [8, 16, 32, 32], "kernel": 3},
    "E": {"channels": [16, 32], "kernel": 5},
}


def _sub_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(tag.encode())])


class Backbone:
    """Conv trunk -> adapter pooling -> centering shift -> top dense layer -> ReLU.

    The shift starts at zero; ``calibrate`` sets it to the mean trunk output
    over a set of (training) images, so the top dense layer sees centred
    features instead of the large common component of post-ReLU averages.
    """

    def __init__(self, identifier: str, seed: int = 0, channels=None, kernel: int = 3,
                 feature_dim: int = FEATURE_DIM, top_gain: float = TOP_DENSE_GAIN):
        spec = BACKBONES.get(identifier, {})
        self.identifier = identifier
        self.seed = seed
        self.channels = list(channels if channels is not None else spec["channels"])
        self.kernel = int(spec.get("kernel", kernel) if channels is None else kernel)
        self.feature_dim = feature_dim
        self.top_gain = float(top_gain)
        rng = _sub_rng(seed, f"backbone/{identifier}")

        layers = []
        c_in = INPUT_CHANNELS
        for i, c_out in enumerate(self.channels):
            layers.append((f"conv{i}", Conv2d(c_in, c_out, self.kernel, stride=2,
                                              padding=self.kernel // 2, rng=rng)))
            layers.append((f"relu{i}", ReLU()))
            c_in = c_out
        layers.append(("adapter", AdaptiveAvgPool2d(ADAPTER_GRID)))
        layers.append(("flatten", Flatten()))
        self.trunk = Sequential(layers)
        self.center = Shift(c_in * ADAPTER_GRID ** 2)
        self.top_dense = Dense(c_in * ADAPTER_GRID ** 2, feature_dim, rng=rng, bias_init="uniform")
        # scaled-down init keeps the elementwise product of two layers at a trainable magnitude
        for k in ("weight", "bias"):
            self.top_dense.params[k] *= self.top_gain
        self.top_act = ReLU()

    def trunk_forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
            raise ShapeMismatch(f"backbone expects (N, {INPUT_CHANNELS}, H, W), got {x.shape}")
        return self.trunk.forward(x)

    def calibrate(self, trunk_features: np.ndarray) -> None:
        """Centre the top dense input on the mean of ``trunk_features``."""
        f = np.asarray(trunk_features, dtype=float)
        if f.ndim != 2 or f.shape[0] == 0:
            raise ValidationError(f"calibration needs a non-empty (N, F) array, got {f.shape}")
        self.center.params["offset"] = f.mean(axis=0)

    def top_forward(self, trunk_features: np.ndarray) -> np.ndarray:
        return self.top_act.forward(self.top_dense.forward(self.center.forward(trunk_features)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.top_forward(self.trunk_forward(x))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad = self.center.backward(self.top_dense.backward(self.top_act.backward(grad)))
        return self.trunk.backward(grad)

    def named_layers(self):
        yield from self.trunk.named_layers("backbone.")
        yield "backbone.center", self.center
        yield "backbone.top_dense", self.top_dense

    def config(self) -> dict:
        return {"identifier": self.identifier, "seed": self.seed, "channels": self.channels,
                "kernel": self.kernel, "feature_dim": self.feature_dim, "top_gain": self.top_gain}


class RegressorHead:
    """Dropout -> average pooling -> dense layer producing 7 pose coordinates."""

    def __init__(self, feature_dim: int = FEATURE_DIM, dropout_rate: float = 0.5,
                 pool_window: int = POOL_WINDOW, seed: int = 0):
        self.feature_dim = feature_dim
        self.pool_window = pool_window
        self.dropout = Dropout(dropout_rate, rng=_sub_rng(seed, "dropout"))
        self.pool = AvgPool1d(pool_window)
        self.output = Dense(feature_dim // pool_window, POSE_DIM, rng=_sub_rng(seed, "head"))

    @property
    def dropout_rate(self) -> float:
        return self.dropout.rate

    def forward(self, features: np.ndarray, train: bool = False) -> np.ndarray:
        return self.output.forward(self.pool.forward(self.dropout.forward(features, train)))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.dropout.backward(self.pool.backward(self.output.backward(grad)))

    def config(self) -> dict:
        return {"feature_dim": self.feature_dim, "dropout_rate": self.dropout.rate,
                "pool_window": self.pool_window}


@dataclass
class PoseNetModel:
    backbone: Backbone
    head: RegressorHead
    s_x: float = S_X_INIT
    s_q: float = S_Q_INIT
    name: str = ""
    lineage: dict = field(default_factory=dict)
    # normalization statistics and rotation convention the model was trained with
    preprocessing: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grad_s_x = 0.0
        self.grad_s_q = 0.0

    # -- forward -----------------------------------------------------------
    def head_forward(self, features: np.ndarray, mode: str = "eval") -> np.ndarray:
        out = self.head.forward(features, train=(mode == "train"))
        if mode == "eval":
            out = renormalize_quaternions(out)
        return out

    def forward(self, batch: np.ndarray, mode: str = "eval") -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
        return self.head_forward(self.backbone.forward(np.asarray(batch, dtype=float)), mode)

    def predict_from_trunk(self, trunk_features: np.ndarray) -> np.ndarray:
        """Eval-mode prediction from cached trunk outputs."""
        return self.head_forward(self.backbone.top_forward(trunk_features), "eval")

    # -- backward ----------------------------------------------------------
    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grad()
        self.grad_s_x = 0.0
        self.grad_s_q = 0.0

    def backward(self, dpred: np.ndarray, ds_x: float = 0.0, ds_q: float = 0.0,
                 through_backbone: bool = True) -> dict[str, np.ndarray]:
        """Accumulate gradients of the loss and return them keyed by parameter name.

        ``dpred`` is the loss gradient with respect to the raw (train-mode)
        7-vector outputs; eval-mode renormalization is not differentiated.
        """
        self.grad_s_x += float(ds_x)
        self.grad_s_q += float(ds_q)
        g = self.head.backward(dpred)
        if through_backbone:
            self.backbone.backward(g)
        grads = self.gradients(include_backbone=through_backbone)
        for k, v in grads.items():
            if not np.all(np.isfinite(v)):
                raise NaNGradient(f"non-finite gradient for {k}")
        return grads

    # -- parameters --------------------------------------------------------
    def named_layers(self):
        yield from self.backbone.named_layers()
        yield "head.output", self.head.output

    def parameters(self, include_backbone: bool = True) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self.named_layers():
            if not include_backbone and lname.startswith("backbone."):
                continue
            for pname, arr in layer.params.items():
                out[f"{lname}.{pname}"] = arr
        out["loss.s_x"] = np.array([self.s_x])
        out["loss.s_q"] = np.array([self.s_q])
        return out

    def gradients(self, include_backbone: bool = True) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self.named_layers():
            if not include_backbone and lname.startswith("backbone."):
                continue
            for pname in layer.params:
                out[f"{lname}.{pname}"] = layer.grads[pname]
        out["loss.s_x"] = np.array([self.grad_s_x])
        out["loss.s_q"] = np.array([self.grad_s_q])
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name == "loss.s_x":
            self.s_x = float(np.asarray(value).reshape(-1)[0])
            return
        if name == "loss.s_q":
            self.s_q = float(np.asarray(value).reshape(-1)[0])
            return
        lname, pname = name.rsplit(".", 1)
        layer = dict(self.named_layers())[lname]
        if layer.params[pname].shape != np.shape(value):
            raise ShapeMismatch(f"{name}: expected {layer.params[pname].shape}, got {np.shape(value)}")
        layer.params[pname] = np.array(value, dtype=float)

    def copy(self) -> "PoseNetModel":
        return copy.deepcopy(self)

    def config(self) -> dict:
        return {"name": self.name, "backbone": self.backbone.config(),
                "head": self.head.config(), "lineage": dict(self.lineage),
                "preprocessing": self.preprocessing}


def renormalize_quaternions(pred: np.ndarray) -> np.ndarray:
    out = np.array(pred, dtype=float, copy=True)
    q = out[:, 3:7]
    n = np.linalg.norm(q, axis=1, keepdims=True)
    out[:, 3:7] = np.where(n > 0, q / np.where(n > 0, n, 1.0), np.array([1.0, 0.0, 0.0, 0.0]))
    return out


def build_model(identifier: str, seed: int = 0, dropout_rate: float = 0.5,
                pool_window: int = POOL_WINDOW, name: str | None = None, **backbone_kw) -> PoseNetModel:
    backbone = Backbone(identifier, seed=seed, **backbone_kw)
    head = RegressorHead(backbone.feature_dim, dropout_rate, pool_window, seed=seed)
    return PoseNetModel(backbone, head, name=name or f"unimodal{identifier}")


def model_from_config(cfg: dict) -> PoseNetModel:
    bb = cfg["backbone"]
    backbone = Backbone(bb["identifier"], seed=bb["seed"], channels=bb["channels"],
                        kernel=bb["kernel"], feature_dim=bb["feature_dim"],
                        top_gain=bb.get("top_gain", TOP_DENSE_GAIN))
    hd = cfg["head"]
    head = RegressorHead(hd["feature_dim"], hd["dropout_rate"], hd["pool_window"], seed=bb["seed"])
    return PoseNetModel(backbone, head, name=cfg.get("name", ""), lineage=dict(cfg.get("lineage", {})),
                        preprocessing=dict(cfg.get("preprocessing", {})))
