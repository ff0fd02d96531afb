"""Two stochastic views per image for the contrastive objective.

All operations take float rasters in [0, 1] (channels-last, square) and an
explicit numpy Generator, so parallel workers can derive independent
substreams. Disabled knobs are skipped entirely, which keeps a fully-identity
policy bit-exact and avoids burning random draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ConfigError

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugmentPolicy:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter: tuple[float, float, float] = (0.4, 0.4, 0.4)  # brightness, contrast, saturation
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"crop_scale must lie within (0, 1], got {self.crop_scale}")
        for name in ("flip_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if any(s < 0 for s in self.jitter):
            raise ConfigError(f"jitter strengths must be non-negative, got {self.jitter}")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(crop_scale=(1.0, 1.0), flip_prob=0.0, jitter=(0.0, 0.0, 0.0),
                   grayscale_prob=0.0, blur_prob=0.0)


def two_views(image: np.ndarray, policy: AugmentPolicy,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample two independent augmentations of the same image."""
    return augment_once(image, policy, rng), augment_once(image, policy, rng)


def augment_once(image: np.ndarray, policy: AugmentPolicy,
                 rng: np.random.Generator) -> np.ndarray:
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ConfigError(f"expected a square HxWx3 raster, got shape {image.shape}")
    side = image.shape[0]
    out = image

    lo, hi = policy.crop_scale
    if hi < 1.0 or lo < 1.0:
        scale = rng.uniform(lo, hi)
        crop = max(1, round(np.sqrt(scale) * side))
        if crop < side:
            y = int(rng.integers(0, side - crop + 1))
            x = int(rng.integers(0, side - crop + 1))
            out = cv2.resize(out[y:y + crop, x:x + crop],
                             (side, side), interpolation=cv2.INTER_LINEAR)

    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        out = out[:, ::-1]

    b, c, s = policy.jitter
    if b > 0:
        out = out * (1.0 + rng.uniform(-b, b))
    if c > 0:
        mean = out.mean()
        out = (out - mean) * (1.0 + rng.uniform(-c, c)) + mean
    if s > 0:
        gray = (out @ _LUMA)[..., None]
        out = gray + (out - gray) * (1.0 + rng.uniform(-s, s))

    if policy.grayscale_prob > 0 and rng.random() < policy.grayscale_prob:
        out = np.repeat((out @ _LUMA)[..., None], 3, axis=2)

    if policy.blur_prob > 0 and rng.random() < policy.blur_prob:
        sigma = rng.uniform(0.1, 2.0)
        out = cv2.GaussianBlur(np.ascontiguousarray(out), (0, 0), sigmaX=sigma)

    if out is image:
        return image.copy()
    return np.clip(out, 0.0, 1.0).astype(np.float32)
