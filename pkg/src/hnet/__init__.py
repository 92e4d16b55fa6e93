"""Byte-level hierarchical sequence modeling with learned dynamic chunking."""

from .chunking import (
    BoundaryDecision,
    ChunkedSequence,
    RoutingModule,
    downsample,
    pool_chunker,
    ratio_loss,
    route,
    smooth,
    spacelike_chunker,
    upsample,
)
from .inference import InferenceSession, SamplingConfig
from .layers import LayerSpec
from .model import HNet, ModelConfig, StageSpec, desk_1stage, desk_2stage
from .tensor import DiffTensor, Tape, finite_difference_check
from .trainer import AdamW, TrainConfig, train_loop

__all__ = [
    "AdamW",
    "BoundaryDecision",
    "ChunkedSequence",
    "DiffTensor",
    "HNet",
    "InferenceSession",
    "LayerSpec",
    "ModelConfig",
    "RoutingModule",
    "SamplingConfig",
    "StageSpec",
    "Tape",
    "TrainConfig",
    "desk_1stage",
    "desk_2stage",
    "downsample",
    "finite_difference_check",
    "pool_chunker",
    "ratio_loss",
    "route",
    "smooth",
    "spacelike_chunker",
    "train_loop",
    "upsample",
]
