"""Finite-difference verification of loss and end-to-end model gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import tensor as T
from .model import HEAD_VARIANTS, ModelConfig, RankerModel, pad_batch

STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the 2-norm; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def random_list(rng: np.random.Generator, loss: str, max_m: int = 10) -> losses.LabeledScores:
    m = int(rng.integers(1, max_m + 1))
    if loss == "pointce" or rng.random() < 0.5:
        labels = (rng.random(m) < 0.4).astype(np.float64)
    else:
        labels = rng.integers(0, 4, size=m).astype(np.float64)
    if loss != "pointce" and labels.sum() == 0:
        labels[int(rng.integers(m))] = 1.0
    return losses.LabeledScores(labels, rng.normal(0.0, 2.0, size=m))


def loss_error(ls: losses.LabeledScores, loss: str, cfg=None, h: float = STEP) -> float:
    out = losses.list_loss(ls, loss, cfg)
    numeric = np.empty(ls.size)
    for j in range(ls.size):
        up, down = ls.scores.copy(), ls.scores.copy()
        up[j] += h
        down[j] -= h
        f_up = losses.list_loss(losses.LabeledScores(ls.labels, up), loss, cfg).value
        f_down = losses.list_loss(losses.LabeledScores(ls.labels, down), loss, cfg).value
        numeric[j] = (f_up - f_down) / (2 * h)
    return relative_error(out.grad, numeric)


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max relative error {self.max_error:.3e} "
            f"(tol {self.tolerance:.0e}, {self.instances} instances, {self.seconds:.1f}s)"
        )


def check_losses(num_lists: int = 200, seed: int = 0, tolerance: float = 1e-5) -> list:
    results = []
    for k, loss in enumerate(losses.LOSS_NAMES):
        rng = np.random.default_rng([seed, k])
        start = time.perf_counter()
        worst = max(loss_error(random_list(rng, loss), loss, losses.Poly1Config(1.0)) for _ in range(num_lists))
        results.append(CheckResult(f"loss/{loss}", num_lists, worst, tolerance, time.perf_counter() - start))
    return results


# ---------------------------------------------------------------- end to end


def gradcheck_config(variant: str, seed: int) -> ModelConfig:
    """Smallest model that still exercises every block of ``variant``."""
    return ModelConfig(
        vocab_size=120,
        model_dim=8,
        num_heads=2,
        ff_dim=16,
        encoder_layers=1,
        decoder_layers=1,
        max_seq_len=8,
        head_variant=variant,
        pooling="mean" if seed % 2 else "first",
        init_scale=1.0,
        seed=seed,
    )


@dataclass
class _Instance:
    model: RankerModel
    ids: np.ndarray
    lists: list = field(default_factory=list)
    loss: str = "softmax"


def _make_instance(variant: str, loss: str, seed: int) -> _Instance:
    rng = np.random.default_rng([seed, HEAD_VARIANTS.index(variant)])
    cfg = gradcheck_config(variant, seed)
    model = RankerModel.init(cfg)
    seqs = [rng.integers(1, cfg.vocab_size, size=int(rng.integers(2, 7))) for _ in range(6)]
    ids = pad_batch(seqs)
    lists = []
    for rows in (np.arange(0, 3), np.arange(3, 6)):
        labels = np.zeros(3)
        labels[int(rng.integers(3))] = 1.0
        lists.append((rows, labels))
    return _Instance(model, ids, lists, loss)


def _instance_loss(inst: _Instance) -> T.Tensor:
    scores = inst.model.forward(inst.ids)
    batch = [losses.LabeledScores(y, scores.data[rows]) for rows, y in inst.lists]
    out = losses.batch_loss(batch, inst.loss, losses.Poly1Config(1.0))
    grad = np.zeros(scores.shape)
    for (rows, _), g in zip(inst.lists, out.grads):
        np.add.at(grad, rows, g)
    return T.external_loss(scores, out.value, grad)


def _value(inst: _Instance) -> float:
    return float(_instance_loss(inst).data)


def model_error(inst: _Instance, rng: np.random.Generator, coords: int = 24, directions: int = 2, h: float = STEP) -> float:
    """Worst norm-wise error over sampled coordinates and random directions."""
    params = inst.model.parameters()
    with T.Tape() as tape:
        loss = _instance_loss(inst)
        inst.model.zero_grad()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], size=min(coords, offsets[-1]), replace=False)
    a_coord, n_coord = [], []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[i].data.reshape(-1)
        j = int(flat - offsets[i])
        keep = p[j]
        p[j] = keep + h
        f_up = _value(inst)
        p[j] = keep - h
        f_down = _value(inst)
        p[j] = keep
        a_coord.append(analytic[i].reshape(-1)[j])
        n_coord.append((f_up - f_down) / (2 * h))
    worst = relative_error(np.array(a_coord), np.array(n_coord))

    base = [p.data.copy() for p in params]
    for _ in range(directions):
        u = [rng.normal(size=p.shape) for p in params]
        norm = np.sqrt(sum(float(np.sum(x * x)) for x in u))
        u = [x / norm for x in u]
        slope = sum(float(np.sum(g * x)) for g, x in zip(analytic, u))
        for p, b, x in zip(params, base, u):
            p.data[...] = b + h * x
        f_up = _value(inst)
        for p, b, x in zip(params, base, u):
            p.data[...] = b - h * x
        f_down = _value(inst)
        for p, b in zip(params, base):
            p.data[...] = b
        worst = max(worst, relative_error(np.array([slope]), np.array([(f_up - f_down) / (2 * h)])))
    return worst


def check_models(instances: int = 20, seed: int = 0, tolerance: float = 1e-4) -> list:
    results = []
    for variant in HEAD_VARIANTS:
        for loss in losses.LOSS_NAMES:
            start = time.perf_counter()
            worst = 0.0
            for i in range(instances):
                inst = _make_instance(variant, loss, seed * 1000 + i)
                rng = np.random.default_rng([seed, i, 7])
                worst = max(worst, model_error(inst, rng))
            results.append(
                CheckResult(f"model/{variant}/{loss}", instances, worst, tolerance, time.perf_counter() - start)
            )
    return results


def run_all(seed: int = 0, num_lists: int = 200, instances: int = 20) -> list:
    return check_losses(num_lists, seed) + check_models(instances, seed)
