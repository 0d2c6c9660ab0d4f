"""Training loop: batch assembly, the five training losses, Adam/SGD."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data, losses
from . import tensor as T
from .model import ModelConfig, RankerModel, pad_batch

TRAIN_LOSSES = ("pointce", "pair", "softmax", "poly1", "generation")
POINTWISE_LOSSES = ("pointce", "generation")
OPTIMIZERS = ("adam", "sgd")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float, config: dict):
        self.step = step
        self.config = config
        super().__init__(
            f"loss became {value} at step {step}; config: {json.dumps(config, sort_keys=True)}"
        )


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "softmax"
    epsilon: float = 1.0
    list_size: int = 36
    batch_size: int = 32
    learning_rate: float = 1e-4
    steps: int = 2000
    seed: int = 0
    eval_every: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    positive: str = "uniform"
    max_seq_len: int = data.DEFAULT_MAX_SEQ_LEN
    with_postfix: bool = False

    def __post_init__(self):
        if self.loss not in TRAIN_LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {TRAIN_LOSSES}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.list_size < 2:
            raise ValueError("list_size must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive and finite")
        if self.positive not in ("uniform", "first"):
            raise ValueError("positive must be 'uniform' or 'first'")

    @property
    def upsampled(self) -> bool:
        return self.loss in POINTWISE_LOSSES

    def to_dict(self) -> dict:
        return asdict(self)


def check_compatible(model_cfg: ModelConfig, cfg: TrainConfig) -> None:
    is_baseline = model_cfg.head_variant == "generation_baseline"
    if (cfg.loss == "generation") != is_baseline:
        raise ValueError(
            f"loss {cfg.loss!r} is incompatible with head {model_cfg.head_variant!r}: "
            "the generation loss and the generation_baseline head go together"
        )


class Adam:
    def __init__(self, params: Sequence[T.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: Sequence[T.Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


def make_optimizer(model: RankerModel, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SGD(model.parameters(), cfg.learning_rate)


@dataclass
class EncodedCorpus:
    """Candidate lists with every query-document pair tokenized once."""

    lists: list
    encoded: list
    skipped: int = 0

    @classmethod
    def build(cls, lists: Sequence[data.CandidateList], vocab: data.Vocabulary, cfg: TrainConfig):
        kept, encoded, skipped = [], [], 0
        for cl in lists:
            if not cl.positives() or not cl.negatives():
                skipped += 1
                continue
            kept.append(cl)
            encoded.append(data.encode_list(cl, vocab, cfg.max_seq_len, cfg.with_postfix))
        if not kept:
            raise data.SamplingError("no candidate list has both a positive and a negative")
        return cls(kept, encoded, skipped)


@dataclass
class Batch:
    """Training lists of one step, with each distinct sequence stored once.

    ``index[i]`` maps the items of list ``i`` to rows of ``sequences``.
    """

    sequences: list
    index: list
    labels: list


def assemble_batch(corpus: EncodedCorpus, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    rows: dict = {}
    sequences, index, labels = [], [], []
    for q in rng.integers(len(corpus.lists), size=cfg.batch_size):
        tl = data.sample_training_list(
            corpus.lists[q], cfg.list_size, rng, encoded=corpus.encoded[q], positive=cfg.positive
        )
        if cfg.upsampled:
            tl = data.upsample_pointwise(tl)
            assert 2 * tl.num_positive == len(tl), "pointwise batch must be balanced"
        else:
            assert tl.num_positive == 1, "listwise batch needs exactly one positive"
        ids = []
        for seq, doc in zip(tl.token_ids, tl.doc_indices):
            key = (int(q), int(doc))
            if key not in rows:
                rows[key] = len(sequences)
                sequences.append(seq)
            ids.append(rows[key])
        index.append(np.asarray(ids, dtype=np.int64))
        labels.append(tl.labels)
    return Batch(sequences, index, labels)


def batch_step(model: RankerModel, batch: Batch, cfg: TrainConfig) -> float:
    """Forward, loss and backward for one batch; leaves gradients on the model."""
    quantity = "margin" if cfg.loss == "generation" else "score"
    with T.Tape() as tape:
        scores = model.forward(pad_batch(batch.sequences), quantity=quantity)
        lists = [losses.LabeledScores(y, scores.data[ix]) for y, ix in zip(batch.labels, batch.index)]
        out = losses.batch_loss(lists, cfg.loss, losses.Poly1Config(cfg.epsilon))
        grad = np.zeros(len(batch.sequences))
        for ix, g in zip(batch.index, out.grads):
            np.add.at(grad, ix, g)
        loss = T.external_loss(scores, out.value, grad)
        model.zero_grad()
        tape.backward(loss)
    return out.value


@dataclass
class TrainResult:
    model: RankerModel
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def train(
    model: RankerModel,
    cfg: TrainConfig,
    corpus: EncodedCorpus,
    out_dir=None,
    evaluate: Optional[Callable[[RankerModel], float]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Run ``cfg.steps`` optimizer updates on ``model`` in place.

    With ``out_dir`` the loss curve goes to ``loss.csv``, periodic
    checkpoints to ``step-<n>.ckpt`` and the final model to ``final.ckpt``.
    ``evaluate`` (model -> dev metric) runs every ``eval_every`` steps.
    """
    check_compatible(model.config, cfg)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    opt = make_optimizer(model, cfg)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for step in range(1, cfg.steps + 1):
        batch = assemble_batch(corpus, cfg, rng)
        value = batch_step(model, batch, cfg)
        if not math.isfinite(value):
            raise TrainingDiverged(step, value, {"train": cfg.to_dict(), "model": model.config.to_dict()})
        opt.step()
        result.losses.append(value)
        at_eval = cfg.eval_every > 0 and (step % cfg.eval_every == 0 or step == cfg.steps)
        if at_eval and evaluate is not None:
            score = evaluate(model)
            result.evals.append((step, score))
            if log:
                log(f"step {step} loss {value:.6f} dev {score:.4f}")
        elif log and step % 100 == 0:
            log(f"step {step} loss {value:.6f}")
        if at_eval and out is not None and step != cfg.steps:
            path = out / f"step-{step}.ckpt"
            model.save(path)
            result.checkpoints.append(str(path))
    if out is not None:
        write_loss_curve(out / "loss.csv", result.losses)
        if result.evals:
            with open(out / "eval.csv", "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f)
                w.writerow(["step", "dev_mrr@10"])
                w.writerows((s, repr(float(v))) for s, v in result.evals)
        path = out / "final.ckpt"
        model.save(path)
        result.checkpoints.append(str(path))
        with open(out / "train_config.json", "w", encoding="utf-8") as f:
            json.dump({"train": cfg.to_dict(), "model": model.config.to_dict()}, f, indent=2, sort_keys=True)
    return result


def write_loss_curve(path, values: Sequence[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(values, start=1):
            w.writerow([i, repr(float(v))])
