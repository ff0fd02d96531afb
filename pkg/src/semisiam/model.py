"""Encoder, projector and predictor heads, plus checkpoint persistence.

The projector output ``z`` is the embedding space shared by both losses and
by pseudo-negative selection; the predictor output ``p`` exists only for the
asymmetric two-view loss.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointMismatchError, ConfigError
from .pseudolabel import FeatureBatch

ARCHITECTURES = ("small-conv", "resnet-like")


@dataclass
class EncoderConfig:
    architecture: str = "small-conv"
    feature_dim: int = 128
    input_side: int = 32

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.feature_dim < 8:
            raise ConfigError(f"feature_dim must be >= 8, got {self.feature_dim}")
        if self.input_side < 16:
            raise ConfigError(f"input_side must be >= 16, got {self.input_side}")


@dataclass
class ViewEmbeddings:
    """Projector (z) and predictor (p) outputs for two views of one batch."""

    z1: torch.Tensor
    z2: torch.Tensor
    p1: torch.Tensor
    p2: torch.Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.z1, self.z2, self.p1, self.p2)}
        if len(shapes) != 1:
            raise ValueError(f"z/p shapes disagree: {sorted(tuple(s) for s in shapes)}")


class SmallConvBackbone(nn.Module):
    """Four stride-2 conv blocks with global average pooling."""

    def __init__(self, channels=(32, 64, 128, 128)):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 3
        for c in channels:
            layers += [
                nn.Conv2d(cin, c, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(inplace=True),
            ]
            cin = c
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = cin

    def forward(self, x):
        return self.pool(self.blocks(x)).flatten(1)


class Projector(nn.Module):
    """Three-layer MLP with batch-normalized hidden layers."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, out_dim, bias=False),
            nn.BatchNorm1d(out_dim),
            nn.ReLU(inplace=True),
            nn.Linear(out_dim, out_dim, bias=False),
            nn.BatchNorm1d(out_dim),
            nn.ReLU(inplace=True),
            nn.Linear(out_dim, out_dim, bias=False),
            nn.BatchNorm1d(out_dim, affine=False),
        )

    def forward(self, x):
        return self.net(x)


class Predictor(nn.Module):
    """Two-layer bottleneck MLP (hidden = dim / 4)."""

    def __init__(self, dim: int):
        super().__init__()
        hidden = max(dim // 4, 8)
        self.net = nn.Sequential(
            nn.Linear(dim, hidden, bias=False),
            nn.BatchNorm1d(hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, dim),
        )

    def forward(self, x):
        return self.net(x)


class SiameseModel(nn.Module):
    """Backbone + projector + predictor with the two embedding taps."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.architecture == "small-conv":
            self.backbone = SmallConvBackbone()
        else:
            import torchvision.models

            net = torchvision.models.resnet50(weights=None)
            net.fc = nn.Identity()
            net.out_dim = 2048
            self.backbone = net
        self.projector = Projector(self.backbone.out_dim, cfg.feature_dim)
        self.predictor = Predictor(cfg.feature_dim)

    def project(self, images: torch.Tensor) -> torch.Tensor:
        return self.projector(self.backbone(images))

    def forward_views(self, view1: torch.Tensor, view2: torch.Tensor) -> ViewEmbeddings:
        if view1.shape[0] != view2.shape[0]:
            raise ValueError("views must share a batch size")
        z1 = self.project(view1)
        z2 = self.project(view2)
        return ViewEmbeddings(z1=z1, z2=z2, p1=self.predictor(z1), p2=self.predictor(z2))

    def encode_features(
        self,
        images: torch.Tensor,
        indices: np.ndarray | None = None,
        tap: str = "projector",
    ) -> FeatureBatch:
        """Embed images for pseudo-labeling or probing; rows are un-normalized.

        ``tap`` selects the projector output (default) or the raw backbone
        ("encoder") features.
        """
        if tap == "projector":
            vectors = self.project(images)
        elif tap == "encoder":
            vectors = self.backbone(images)
        else:
            raise ConfigError(f"unknown feature tap {tap!r}")
        return FeatureBatch(vectors=vectors, source_indices=indices)


def build_model(cfg: EncoderConfig) -> SiameseModel:
    return SiameseModel(cfg)


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict | None
    weights_state: dict | None
    epoch: int
    config_hash: str
    metrics: dict | None = None


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write the binary blob plus a sidecar metadata file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model_state": ckpt.model_state,
            "optimizer_state": ckpt.optimizer_state,
            "weights_state": ckpt.weights_state,
            "epoch": ckpt.epoch,
            "config_hash": ckpt.config_hash,
        },
        path,
    )
    meta = {"epoch": ckpt.epoch, "config_hash": ckpt.config_hash, "metrics": ckpt.metrics}
    sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path, expected_config_hash: str | None = None) -> Checkpoint:
    """Load a checkpoint; verify the config hash when one is expected."""
    path = Path(path)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    metrics = None
    if sidecar(path).exists():
        metrics = json.loads(sidecar(path).read_text()).get("metrics")
    ckpt = Checkpoint(
        model_state=blob["model_state"],
        optimizer_state=blob["optimizer_state"],
        weights_state=blob["weights_state"],
        epoch=int(blob["epoch"]),
        config_hash=str(blob["config_hash"]),
        metrics=metrics,
    )
    if expected_config_hash is not None and ckpt.config_hash != expected_config_hash:
        raise CheckpointMismatchError(
            f"checkpoint config hash {ckpt.config_hash[:12]} does not match "
            f"current config {expected_config_hash[:12]}"
        )
    return ckpt


def sidecar(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def state_fingerprint(module: nn.Module) -> str:
    """Hash of all parameter and buffer bytes, for change-detection tests."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
