"""Desk-scale learning-to-rank: toy transformer rerankers, ranking losses, IR metrics."""

from . import data, losses, metrics, tensor, train
from .kernels import BACKEND
from .losses import LabeledScores, LossOutput, Poly1Config, batch_loss, list_loss
from .metrics import RankedList, paired_t_test, sort_by_scores
from .model import ModelConfig, RankerModel
from .tensor import Tape, Tensor
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "LabeledScores",
    "LossOutput",
    "ModelConfig",
    "Poly1Config",
    "RankedList",
    "RankerModel",
    "Tape",
    "Tensor",
    "TrainConfig",
    "batch_loss",
    "data",
    "list_loss",
    "losses",
    "metrics",
    "paired_t_test",
    "sort_by_scores",
    "tensor",
    "train",
]
