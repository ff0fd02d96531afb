"""Experiment configuration: defaults, file loading, overrides, hashing.

Precedence is defaults < config file < command-line overrides. The config
hash pins checkpoints to the configuration that produced them (the output
directory is excluded so runs can be relocated).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_args, get_origin, get_type_hints

from .augment import AugmentPolicy
from .datagen import SynthConfig
from .errors import ConfigError
from .model import EncoderConfig

LOSS_MODES = ("loss1", "loss2", "loss1+2", "supervised")


@dataclass
class DataConfig:
    root: str = "data/desk"
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    fractions: tuple[float, float, float] = (0.5, 0.2, 0.3)
    labeled_block_fraction: float = 0.06
    enrich_positive_fraction: float | None = 0.12
    resize: int = 32
    upsample_mode: str = "balance"  # balance | factor | none
    upsample_factor: int = 1

    def __post_init__(self):
        if self.upsample_mode not in ("balance", "factor", "none"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.resize < 8:
            raise ConfigError(f"resize side too small: {self.resize}")


@dataclass
class OptimConfig:
    lr: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.9
    schedule: str = "cosine"  # cosine | constant
    # the predictor head keeps its base lr while the rest decays, which is
    # the cited two-view method's stability recipe for long schedules
    decay_predictor_lr: bool = False

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    batch_unlabeled: int = 128
    batch_labeled: int = 16
    epochs: int = 30
    loss_mode: str = "loss1+2"
    seed: int = 0
    temperature: float = 0.1
    subgroup_size: int = 16
    out_dir: str = "runs/run"
    feature_tap: str = "projector"  # pseudo-label tap: projector | encoder
    probe_tap: str = "encoder"      # probe/eval tap: encoder per the cited protocol
    supcon_reduction: str = "sum"   # sum | mean
    include_labeled_in_cosine: bool = False
    # Fuse (shift + loss_cosine) instead of the raw negative cosine: with the
    # raw value in [-1, 0] the log-variance weight diverges, and with shift 1
    # its optimum e^{-v1} = 1/(1 + loss_cosine) still explodes as alignment
    # completes. Shift 2 bounds the weight by 1. Model gradients are identical;
    # 0 disables the shift.
    fusion_cosine_shift: float = 2.0
    probe_epochs: int = 50
    probe_lr: float = 0.1
    probe_batch: int = 64
    baseline_epochs: int = 16
    ablation_seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_mode in ("loss2", "loss1+2"):
            k = self.subgroup_size
            if self.batch_unlabeled < k or self.batch_labeled < k:
                raise ConfigError(
                    f"batch sizes ({self.batch_unlabeled}, {self.batch_labeled}) must be "
                    f">= subgroup size {k} when the supervised branch is active"
                )
        for name in ("feature_tap", "probe_tap"):
            if getattr(self, name) not in ("projector", "encoder"):
                raise ConfigError(f"unknown {name} {getattr(self, name)!r}")
        if self.supcon_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown supcon_reduction {self.supcon_reduction!r}")

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def apply_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` pairs; keys must already exist."""
        data = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            dotted, value = item.split("=", 1)
            node = data
            parts = dotted.split(".")
            for part in parts[:-1]:
                if not isinstance(node, dict) or part not in node:
                    raise ConfigError(f"override names unknown config key {dotted!r}")
                node = node[part]
            leaf = parts[-1]
            if not isinstance(node, dict) or leaf not in node:
                raise ConfigError(f"override names unknown config key {dotted!r}")
            node[leaf] = _parse_value(value, node[leaf])
        return RunConfig.from_dict(data)

    def config_hash(self) -> str:
        data = self.to_dict()
        data.pop("out_dir")
        canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _parse_value(raw: str, current):
    """Coerce an override string toward the type of the value it replaces."""
    if raw.lower() in ("none", "null"):
        return None
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if current is None or isinstance(current, (list, tuple)):
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _build(cls, data: dict):
    """Recursively construct a dataclass, coercing lists to tuple fields."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = get_type_hints(cls)
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        target = hints[key]
        if dataclasses.is_dataclass(target) and isinstance(value, dict):
            kwargs[key] = _build(target, value)
        elif (get_origin(target) is tuple or isinstance(getattr(cls, key, None), tuple)) \
                and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def desk_config(out_dir: str = "runs/desk", data_root: str = "data/desk") -> RunConfig:
    """Small-scale configuration sized for CPU-only end-to-end runs."""
    return RunConfig(
        data=DataConfig(
            root=data_root,
            synth=SynthConfig(
                canvas_size=2336,
                tile_size=32,
                target_positive_ratio=0.02,
                structure_size_range=(10, 24),
                noise_octaves=6,
                cluster_prob=0.65,
                cluster_radius_tiles=1.2,
            ),
            fractions=(0.45, 0.25, 0.30),
            labeled_block_fraction=0.06,
            enrich_positive_fraction=0.18,
            resize=32,
        ),
        model=EncoderConfig(architecture="small-conv", feature_dim=128, input_side=32),
        optim=OptimConfig(lr=0.05, weight_decay=1e-4, momentum=0.9, schedule="cosine"),
        augment=AugmentPolicy(crop_scale=(0.4, 1.0), blur_prob=0.0),
        batch_unlabeled=256,
        batch_labeled=16,
        epochs=30,
        temperature=0.5,
        subgroup_size=8,
        supcon_reduction="mean",
        include_labeled_in_cosine=True,
        out_dir=out_dir,
    )


def paper_scale_config(out_dir: str = "runs/full") -> RunConfig:
    """Full-scale settings: ResNet-style encoder, 2048-d features, 512/16
    batches, 200 epochs. Provided for completeness; not CPU-friendly."""
    return RunConfig(
        data=DataConfig(
            root="data/full",
            synth=SynthConfig(canvas_size=8192, tile_size=256, target_positive_ratio=0.01),
            resize=128,
        ),
        model=EncoderConfig(architecture="resnet-like", feature_dim=2048, input_side=128),
        optim=OptimConfig(lr=0.1, weight_decay=1e-4, momentum=0.9),
        augment=AugmentPolicy(),
        batch_unlabeled=512,
        batch_labeled=16,
        epochs=200,
        out_dir=out_dir,
    )
