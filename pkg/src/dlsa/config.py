"""Experiment configuration: one JSON file fully determines a run.

Top-level keys mirror ExperimentConfig fields; "synthetic" and "train" hold
nested objects for the dataset generator and the trainer. Unknown keys are
rejected rather than ignored so typos cannot silently change a run. The
global seed is the single entropy source: nested blocks that do not set
their own seed inherit it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .classifiers import RESIDUAL_KINDS
from .data import SyntheticSpec
from .errors import ConfigError
from .training import TrainConfig

NMI_NORMALIZATIONS = ("geometric", "arithmetic")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    stages: int = 3
    classifier: str = "balsoftmax"
    nmi_normalization: str = "geometric"
    head_threshold: int = 50
    confusion_bins: int = 20
    probe_grid: list = field(default_factory=lambda: [0.5, 0.7, 0.9, 1.0])
    synthetic: SyntheticSpec | None = None
    train_file: str | None = None
    test_file: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.train.validate()
        checks = [
            (self.stages >= 0, f"stages must be >= 0, got {self.stages}"),
            (self.classifier in RESIDUAL_KINDS,
             f"classifier must be one of {RESIDUAL_KINDS}, got {self.classifier!r}"),
            (self.nmi_normalization in NMI_NORMALIZATIONS,
             f"nmi_normalization must be one of {NMI_NORMALIZATIONS}"),
            (self.head_threshold >= 1,
             f"head_threshold must be >= 1, got {self.head_threshold}"),
            (self.confusion_bins >= 2,
             f"confusion_bins must be >= 2, got {self.confusion_bins}"),
            (all(0.5 <= p <= 1.0 for p in self.probe_grid),
             f"probe_grid values must lie in [0.5, 1], got {self.probe_grid}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict:
        return asdict(self)

    # default artifact locations let gen -> train -> eval share one config
    def resolved_train_file(self) -> str:
        return self.train_file or f"{self.out_dir}/train.dlft"

    def resolved_test_file(self) -> str:
        return self.test_file or f"{self.out_dir}/test.dlft"


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {where} block: {exc}") from None


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a JSON object, got {type(data).__name__}")
    data = dict(data)
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    synthetic = data.pop("synthetic", None)
    train = data.pop("train", None)
    cfg = _build(ExperimentConfig, data, "config")
    if synthetic is not None:
        synthetic = dict(synthetic)
        synthetic.setdefault("seed", seed)
        cfg.synthetic = _build(SyntheticSpec, synthetic, "synthetic")
    if train is None:
        train = {}
    elif not isinstance(train, dict):
        raise ConfigError(f"train must be a JSON object, got {type(train).__name__}")
    train = dict(train)
    train.setdefault("seed", seed)
    cfg.train = _build(TrainConfig, train, "train")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return parse_config(data)


def set_global_seed(cfg: ExperimentConfig, seed: int):
    """Flag override: rewires every nested seed, keeping one entropy source."""
    cfg.seed = seed
    cfg.train.seed = seed
    if cfg.synthetic is not None:
        cfg.synthetic.seed = seed
