"""Recursive encoder-decoder edge detector, desk scale.

A self-contained stack: a dense-tensor autodiff core, the recursive
encoder-decoder network with skip links, its training loop, a synthetic data
pipeline with exact ground truth, and the ODS/OIS/AP boundary benchmark.
"""

from .tensor import Tape, Tensor, backward
from .model import (
    DenseBlockConfig,
    ForwardResult,
    ModelParameters,
    REDNetConfig,
    build_model,
    default_config,
    pad_to_grid,
    parameter_count,
    rednet_forward,
)
from .training import TrainConfig, deep_supervised_loss, train, weighted_bce
from .evaluation import BenchmarkScores, evaluate, nms

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "DenseBlockConfig",
    "REDNetConfig",
    "default_config",
    "ModelParameters",
    "build_model",
    "parameter_count",
    "rednet_forward",
    "ForwardResult",
    "pad_to_grid",
    "TrainConfig",
    "train",
    "weighted_bce",
    "deep_supervised_loss",
    "BenchmarkScores",
    "evaluate",
    "nms",
    "__version__",
]
