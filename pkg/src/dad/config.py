"""Training configuration and named run profiles."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .anchors import AnchorConfig
from .data import ResizeSpec
from .evaluation import EvalConfig
from .losses import FocalParams, LossWeights
from .model import ConfigError, ModelConfig
from .postprocess import DecodeConfig


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    base_lr: float = 1e-5
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    plateau_rel_tol: float = 1e-4
    max_epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)
    grad_clip_norm: float = 10.0
    hflip: bool = False
    attr_on_negatives: bool = False
    val_fraction: float = 0.25
    keep_epoch_checkpoints: bool = True

    def __post_init__(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "focal" in d:
            d["focal"] = FocalParams(**d["focal"])
        return cls(**d)


@dataclass(frozen=True)
class RunProfile:
    name: str
    model: ModelConfig
    anchors: AnchorConfig
    train: TrainConfig
    decode: DecodeConfig
    resize: ResizeSpec
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.model.anchors_per_location != self.anchors.num_anchors:
            raise ConfigError(
                f"model expects {self.model.anchors_per_location} anchors per location, "
                f"anchor config yields {self.anchors.num_anchors}")
        if self.model.num_levels != len(self.anchors.levels):
            raise ConfigError("model pyramid levels and anchor levels disagree")
        if tuple(s for s, _ in self.anchors.levels) != self.model.strides:
            raise ConfigError("anchor strides must match the model's pyramid strides")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "model": asdict(self.model),
            "anchors": self.anchors.to_dict(),
            "train": self.train.to_dict(),
            "decode": self.decode.to_dict(),
            "resize": self.resize.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunProfile":
        return cls(
            name=d["name"],
            model=ModelConfig(**d["model"]),
            anchors=AnchorConfig.from_dict(d["anchors"]),
            train=TrainConfig.from_dict(d["train"]),
            decode=DecodeConfig(**d["decode"]),
            resize=ResizeSpec(**d["resize"]),
            eval=EvalConfig(**d.get("eval", {})),
        )

    def with_overrides(self, overrides: dict) -> "RunProfile":
        """Merge a nested ``{"train": {...}, "model": {...}}`` mapping."""
        d = self.to_dict()
        for section, values in overrides.items():
            if section == "name":
                d["name"] = values
                continue
            if section not in d or not isinstance(values, dict):
                raise ConfigError(f"unknown profile section {section!r}")
            for k, v in values.items():
                if k not in d[section]:
                    raise ConfigError(f"unknown setting {section}.{k}")
                if isinstance(d[section][k], dict):
                    d[section][k] = {**d[section][k], **v}
                else:
                    d[section][k] = v
        return RunProfile.from_dict(d)

    def with_dataset(self, num_classes: int, num_attributes: int) -> "RunProfile":
        return replace(self, model=replace(self.model, num_classes=num_classes,
                                           num_attributes=num_attributes))


def shapes_tiny() -> RunProfile:
    """Desk-scale profile for the synthetic shapes set (about 5 CPU minutes)."""
    return RunProfile(
        name="shapes-tiny",
        model=ModelConfig(num_classes=3, num_attributes=8, anchors_per_location=9,
                          backbone="tiny-resnet", fpn_channels=64, head_depth=4, num_levels=3),
        anchors=AnchorConfig(levels=((8, 16.0), (16, 32.0), (32, 64.0))),
        # flips matter here: without them recall@0.5 stalls below 0.8 at 30 epochs
        train=TrainConfig(base_lr=1e-3, max_epochs=30, batch_size=4, seed=0, hflip=True),
        decode=DecodeConfig(),
        resize=ResizeSpec(min_side=96, max_side=160),
    )


def apascal_paper() -> RunProfile:
    return RunProfile(
        name="apascal-paper",
        model=ModelConfig(num_classes=20, num_attributes=64, anchors_per_location=9,
                          backbone="resnet-152-shape", fpn_channels=256, head_depth=4,
                          num_levels=5),
        anchors=AnchorConfig(),
        train=TrainConfig(beta1=0.9, beta2=0.99, base_lr=1e-5, plateau_factor=0.5,
                          plateau_patience=2, max_epochs=50, batch_size=1, seed=0),
        decode=DecodeConfig(),
        resize=ResizeSpec(min_side=800, max_side=1333),
    )


PROFILES = {"shapes-tiny": shapes_tiny, "apascal-paper": apascal_paper}


def get_profile(name: str) -> RunProfile:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
