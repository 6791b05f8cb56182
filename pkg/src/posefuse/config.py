"""Experiment configuration: an INI file with sections.

Example::

    [experiment]
    seed = 0
    output_dir = runs/seed0
    baseline = unimodalA

    [dataset]
    source = synthetic        # or a dataset directory containing poses.txt
    n = 600

    [train]
    epochs = 200

    [fusion:extra_lf]
    stage = late
    op = average
    members = unimodalA, unimodalB, models/other.pfm

Every ``[fusion:<name>]`` section becomes a ``FusionSpec``; members are model
file paths or names of models built earlier in the same pipeline run.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ValidationError
from .fusion import FusionSpec
from .nn.training import TrainConfig


@dataclass
class ModelConfig:
    early_pair: tuple[str, str] = ("A", "B")
    lf_members: tuple[str, ...] = ("A", "B", "C", "D", "E")
    feature_dim: int | None = None
    pool_window: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: str = "synthetic"
    n: int = 600
    baseline: str = "unimodalA"
    timing: bool = True
    mapst_samples: int = 20
    hlff_variant: str = "four"
    convention: str = "zyx"
    rotation_formula: str = "standard"
    write_dataset: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusions: dict[str, FusionSpec] = field(default_factory=dict)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["fusions"] = {k: {"stage": v.stage, "op": v.op.value, "members": list(v.members)}
                        for k, v in self.fusions.items()}
        return d


def _list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.replace("\n", ",").split(",") if v.strip())


def parse_config(text: str, base_dir: str | Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
    try:
        return _from_parser(cp, base_dir)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"invalid config value: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"invalid config value: {exc}") from exc


def _from_parser(cp: configparser.ConfigParser, base_dir) -> ExperimentConfig:
    cfg = ExperimentConfig()

    if cp.has_section("experiment"):
        s = cp["experiment"]
        cfg.seed = s.getint("seed", cfg.seed)
        cfg.output_dir = s.get("output_dir", cfg.output_dir)
        cfg.baseline = s.get("baseline", cfg.baseline)
        cfg.timing = s.getboolean("timing", cfg.timing)
        cfg.mapst_samples = s.getint("mapst_samples", cfg.mapst_samples)
        cfg.hlff_variant = s.get("hlff_variant", cfg.hlff_variant)
        cfg.convention = s.get("convention", cfg.convention)
        cfg.rotation_formula = s.get("rotation_formula", cfg.rotation_formula)
    if cp.has_section("dataset"):
        s = cp["dataset"]
        cfg.dataset = s.get("source", cfg.dataset)
        cfg.n = s.getint("n", cfg.n)
        cfg.write_dataset = s.getboolean("write", cfg.write_dataset)

    t = cp["train"] if cp.has_section("train") else {}
    cfg.train = TrainConfig(
        learning_rate=float(t.get("learning_rate", 0.01)),
        batch_size=int(t.get("batch_size", 34)),
        dropout_rate=float(t.get("dropout_rate", 0.5)),
        epochs=int(t.get("epochs", 200)),
        seed=int(t.get("seed", cfg.seed)),
        norm=str(t.get("norm", "l1")),
    )

    if cp.has_section("model"):
        s = cp["model"]
        pair = _list(s.get("early_pair", "A, B"))
        if len(pair) != 2:
            raise ValidationError(f"early_pair needs exactly two backbones, got {pair}")
        cfg.model = ModelConfig(
            early_pair=(pair[0], pair[1]),
            lf_members=_list(s.get("lf_members", ",".join(cfg.model.lf_members))),
            feature_dim=s.getint("feature_dim", None),
            pool_window=s.getint("pool_window", None),
        )

    for name in cp.sections():
        if name.startswith("fusion:"):
            s = cp[name]
            cfg.fusions[name.split(":", 1)[1]] = FusionSpec(s.get("stage"), s.get("op"), _list(s.get("members", "")))

    if base_dir is not None:
        base = Path(base_dir)
        if cfg.dataset != "synthetic" and not Path(cfg.dataset).is_absolute():
            cfg.dataset = str(base / cfg.dataset)
        if not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str(base / cfg.output_dir)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
