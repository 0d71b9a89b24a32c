"""Run configuration: toy-scale defaults, JSON round trip, strict key
checking, and flat command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .backbone import BackboneConfig, ConfigError


@dataclass
class RunConfig:
    # backbone
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple = (2, 2)
    heads: tuple = (2, 4)
    window: int = 4
    mlp_ratio: int = 4
    head_input: str = "pooled"
    head_hidden: int = 64
    use_relative_position_bias: bool = False
    # tuning additions (full-scale references: prompt length 5, tau 4, lambda 0.1)
    prompt_len: int = 4
    tau: float = 4.0
    lam: float = 0.1
    # data
    scheme: str = "ternary"
    n_subjects: int = 600
    folds: int = 5
    test_frac: float = 0.2
    data_dir: str = "data"
    out_dir: str = "runs"
    seed: int = 7
    augment: bool = True
    # pretraining (full-scale reference: AdamW 5e-5, 50 epochs, 10 warm-up)
    pretrain_epochs: int = 20
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3
    pretrain_weight_decay: float = 0.01
    pretrain_warmup_epochs: int = 2
    # prompt tuning (full-scale reference: SGD 0.01, 100 epochs, 10 warm-up;
    # AdamW converges much faster at this toy scale)
    tune_epochs: int = 12
    tune_batch: int = 16
    tune_optimizer: str = "adamw"
    tune_lr: float = 0.01
    tune_momentum: float = 0.9
    tune_weight_decay: float = 0.01
    tune_warmup_epochs: int = 1

    def __post_init__(self):
        if self.tune_optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown tune optimizer {self.tune_optimizer!r}")

    @property
    def num_classes(self):
        if self.scheme == "binary":
            return 2
        if self.scheme == "ternary":
            return 3
        raise ConfigError(f"unknown label scheme {self.scheme!r}")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depths=tuple(self.depths),
            heads=tuple(self.heads),
            window=self.window,
            num_classes=self.num_classes,
            mlp_ratio=self.mlp_ratio,
            head_input=self.head_input,
            head_hidden=self.head_hidden,
            use_relative_position_bias=self.use_relative_position_bias,
        )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, d):
        known = set(cls.field_names())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("depths", "heads"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.backbone()  # validate the backbone subset eagerly
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
