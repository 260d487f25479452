"""Checkpoint merging with the Mixture of Distributions threshold rule and baselines."""

from .checkpoint_io import DType, Tensor, TensorIndex, open_checkpoint, read_tensor, write_checkpoint
from .config import MergeConfig, MergePlan, build_plan, parse_config

__version__ = "0.1.0"

__all__ = [
    "DType",
    "Tensor",
    "TensorIndex",
    "open_checkpoint",
    "read_tensor",
    "write_checkpoint",
    "MergeConfig",
    "MergePlan",
    "build_plan",
    "parse_config",
]
