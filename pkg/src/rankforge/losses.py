"""Ranking losses over one list of labels and scores.

Each loss returns its value together with the analytic gradient with respect
to the scores, so the trainer can splice it into the tape as a single node.
All of them are computed with softplus / log-sum-exp forms and never
exponentiate a raw score.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class LabeledScores:
    """Relevance labels and model scores for the m documents of one query."""

    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.float64).reshape(-1)
        scores = np.ascontiguousarray(self.scores, dtype=np.float64).reshape(-1)
        if labels.shape != scores.shape:
            raise ValueError(f"{labels.size} labels but {scores.size} scores")
        if labels.size == 0:
            raise ValueError("a list needs at least one document")
        if np.any(labels < 0):
            raise ValueError("relevance labels must be nonnegative")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "scores", scores)

    @property
    def size(self) -> int:
        return self.labels.size


@dataclass(frozen=True)
class LossOutput:
    value: float
    grad: np.ndarray


@dataclass(frozen=True)
class Poly1Config:
    """Coefficient on the first polynomial term of the softmax loss."""

    epsilon: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be finite, got {self.epsilon}")


def point_ce(ls: LabeledScores) -> LossOutput:
    """Pointwise sigmoid cross entropy, summed over the list.

    Only defined for binary labels.
    """
    if not np.all((ls.labels == 0.0) | (ls.labels == 1.0)):
        raise ValueError("point_ce is only applicable to binary relevance labels")
    value, grad = kernels.point_ce(ls.labels, ls.scores)
    return LossOutput(float(value), np.asarray(grad))


def pair_logistic(ls: LabeledScores) -> LossOutput:
    """Logistic loss summed over every pair whose labels are ordered."""
    value, grad = kernels.pair_logistic(ls.labels, ls.scores)
    return LossOutput(float(value), np.asarray(grad))


def softmax_ce(ls: LabeledScores) -> LossOutput:
    """Listwise softmax cross entropy; zero when the list has no positive label."""
    value, grad = kernels.softmax_ce(ls.labels, ls.scores)
    return LossOutput(float(value), np.asarray(grad))


def poly1_softmax_ce(ls: LabeledScores, cfg: Optional[Poly1Config] = None) -> LossOutput:
    """Softmax cross entropy plus ``epsilon * sum_j y_j * (1 - p_j)``."""
    cfg = cfg or Poly1Config()
    if cfg.epsilon == 0.0:
        return softmax_ce(ls)
    value, grad = kernels.poly1_softmax_ce(ls.labels, ls.scores, float(cfg.epsilon))
    return LossOutput(float(value), np.asarray(grad))


LOSS_NAMES = ("pointce", "pair", "softmax", "poly1")


def list_loss(ls: LabeledScores, loss: str, cfg: Optional[Poly1Config] = None) -> LossOutput:
    """Dispatch one of ``LOSS_NAMES`` by name.

    ``"generation"`` is accepted as an alias of ``"pointce"``: the two-class
    cross entropy over the positive and negative token logits equals the
    sigmoid cross entropy of their difference.
    """
    if loss in ("pointce", "generation"):
        return point_ce(ls)
    if loss == "pair":
        return pair_logistic(ls)
    if loss == "softmax":
        return softmax_ce(ls)
    if loss == "poly1":
        return poly1_softmax_ce(ls, cfg)
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSS_NAMES + ('generation',)}")


@dataclass(frozen=True)
class BatchLoss:
    value: float
    grads: list = field(default_factory=list)
    per_list: list = field(default_factory=list)


def batch_loss(
    lists: Sequence[LabeledScores], loss: str, cfg: Optional[Poly1Config] = None
) -> BatchLoss:
    """Mean of the per-list losses; each list's gradient is scaled by 1/batch."""
    if not lists:
        raise ValueError("batch_loss needs a nonempty batch")
    outs = [list_loss(ls, loss, cfg) for ls in lists]
    n = len(outs)
    total = 0.0
    for out in outs:
        total += out.value
    return BatchLoss(
        value=total / n,
        grads=[out.grad / n for out in outs],
        per_list=[out.value for out in outs],
    )
