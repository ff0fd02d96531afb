"""Semi-supervised contrastive learning for long-tailed image tile datasets."""

__version__ = "0.1.0"

from .config import DataConfig, OptimConfig, RunConfig, desk_config, paper_scale_config
from .errors import (CheckpointMismatchError, ConfigError, DatasetError,
                     DegenerateBatchError, SemisiamError)

__all__ = [
    "CheckpointMismatchError",
    "ConfigError",
    "DataConfig",
    "DatasetError",
    "DegenerateBatchError",
    "OptimConfig",
    "RunConfig",
    "SemisiamError",
    "desk_config",
    "paper_scale_config",
    "__version__",
]
