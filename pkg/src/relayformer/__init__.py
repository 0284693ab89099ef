"""Skeleton-based action recognition with relay-node relative transformers.

The package bundles a small numpy-backed autodiff engine, skeleton graph
topology, a graph-convolution trunk, spatial and temporal relative
transformer streams, a training/evaluation harness, and a FastAPI service
with a thin command-line client.
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    ActionRecognizer,
    ModelConfig,
    bone_features,
    build_model,
    ensemble_scores,
    export_attention,
    load_checkpoint,
    save_checkpoint,
    tiny_config,
)
from .tensor import Tensor, gradient, finite_difference_gradient  # noqa: F401
from .topology import SkeletonGraph, build_skeleton_graph  # noqa: F401
from .training import TrainConfig, evaluate, lr_schedule, train  # noqa: F401
