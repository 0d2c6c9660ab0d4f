"""Reranking, evaluation, sweeps and zero-shot tables built on the trainer."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import data, metrics, synth
from .model import ModelConfig, RankerModel
from .train import EncodedCorpus, TrainConfig, train

log = logging.getLogger("rankforge")

DEFAULT_METRICS = ("mrr@10", "ndcg@5", "ndcg@10", "ndcg", "map", "recall@5")
LIST_SIZES = (5, 10, 20, 30, 36)
MODEL_PRESETS = ("tiny", "small", "base-toy")
SIGNIFICANCE_LEVEL = 0.05


# ---------------------------------------------------------------- reranking


def score_candidates(model: RankerModel, vocab: data.Vocabulary, cl: data.CandidateList, with_postfix=False):
    seqs = data.encode_list(cl, vocab, model.config.max_seq_len, with_postfix)
    return model.scores(seqs)


def rerank_lists(
    model: RankerModel,
    vocab: data.Vocabulary,
    lists,
    top_k: Optional[int] = None,
    tag: str = "rankforge",
    with_postfix: bool = False,
) -> tuple:
    """Score and sort every list; returns ``(run_records, skipped_query_ids)``.

    Ties keep the input candidate order, so reruns are bit-identical.
    """
    records, skipped = [], []
    for cl in lists:
        if not cl.candidates:
            log.warning("query %s has no candidates; skipped", cl.query_id)
            skipped.append(cl.query_id)
            continue
        scores = score_candidates(model, vocab, cl, with_postfix)
        order = np.argsort(-scores, kind="stable")
        if top_k is not None:
            order = order[:top_k]
        for rank, i in enumerate(order, start=1):
            records.append(data.RunRecord(cl.query_id, cl.candidates[i].doc_id, rank, float(scores[i]), tag))
    return records, skipped


def rerank(model, vocab, candidates_path, run_path, top_k=None, tag="rankforge", with_postfix=False) -> dict:
    records, skipped = rerank_lists(model, vocab, data.read_candidates(candidates_path), top_k, tag, with_postfix)
    data.write_run(run_path, records)
    return {"lines": len(records), "skipped": skipped}


# ---------------------------------------------------------------- evaluation


@dataclass
class ExperimentResult:
    config: dict
    # metric -> {"mean": float, "per_query": {qid: value}}
    metrics: dict = field(default_factory=dict)
    # metric -> {"baseline_mean", "t", "p", "significant"}
    significance: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def mean(self, metric: str) -> float:
        return self.metrics[metric]["mean"]

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "ExperimentResult":
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))

    def table_rows(self) -> list:
        rows = []
        for name, entry in self.metrics.items():
            sig = self.significance.get(name, {})
            marker = "*" if sig.get("significant") else ""
            p = sig.get("p")
            rows.append([name, f"{entry['mean']:.6f}{marker}", "" if p is None else f"{p:.6g}"])
        return rows

    def to_tsv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["metric", "mean", "p_vs_baseline"])
            w.writerows(self.table_rows())


def rankings_for_eval(run_rankings: Mapping, qrels: Mapping, empty_queries: str = "zero") -> tuple:
    """Pair each run query with its judgments under the empty-query convention.

    Returns ``(rankings, missing)`` where ``missing`` lists run queries absent
    from the qrels. Under ``"zero"`` they stay (and score 0); under ``"drop"``
    they are left out, as are queries without any relevant document.
    """
    rankings, missing = {}, []
    for qid, doc_ids in run_rankings.items():
        rel = qrels.get(qid)
        if rel is None:
            missing.append(qid)
        rl = metrics.RankedList(tuple(doc_ids), rel or {})
        if empty_queries == "drop" and rl.num_relevant("global") == 0:
            continue
        rankings[qid] = rl
    return rankings, missing


def evaluate_run(
    run: Sequence[data.RunRecord],
    qrels: Mapping,
    metric_names: Sequence[str] = DEFAULT_METRICS,
    baseline: Optional[Sequence[data.RunRecord]] = None,
    empty_queries: str = "zero",
    normalization: str = "list",
    config: Optional[dict] = None,
) -> ExperimentResult:
    rankings, missing = rankings_for_eval(data.run_rankings(run), qrels, empty_queries)
    reports = metrics.evaluate_rankings(rankings, metric_names, empty_queries, normalization)
    result = ExperimentResult(
        config=dict(config or {}, empty_queries=empty_queries, normalization=normalization),
        metrics={n: {"mean": r.mean, "per_query": r.per_query} for n, r in reports.items()},
        diagnostics={"queries": len(rankings), "missing_from_qrels": missing},
    )
    if baseline is not None:
        base_rankings, _ = rankings_for_eval(data.run_rankings(baseline), qrels, empty_queries)
        base = metrics.evaluate_rankings(base_rankings, metric_names, empty_queries, normalization)
        for name in metric_names:
            result.significance[name] = compare(reports[name].per_query, base[name].per_query)
    return result


def compare(system: Mapping, baseline: Mapping) -> dict:
    """Paired t-test on the shared queries; marks wins with ``p <= 0.05``."""
    shared = [q for q in system if q in baseline]
    a = [system[q] for q in shared]
    b = [baseline[q] for q in shared]
    out = {"queries": len(shared), "baseline_mean": math.fsum(b) / len(b) if b else 0.0}
    if len(shared) < 2:
        out.update(t=None, p=None, significant=False)
        return out
    t, p = metrics.paired_t_test(a, b)
    improves = math.fsum(a) > math.fsum(b)
    out.update(t=t, p=p, significant=bool(p <= SIGNIFICANCE_LEVEL and improves))
    return out


def evaluate_files(run_path, qrels_path, metric_names=DEFAULT_METRICS, baseline_path=None, **kw) -> ExperimentResult:
    run = data.read_run(run_path)
    baseline = data.read_run(baseline_path) if baseline_path else None
    config = {"run": str(run_path), "qrels": str(qrels_path), "baseline": baseline_path and str(baseline_path)}
    return evaluate_run(run, data.read_qrels(qrels_path), metric_names, baseline, config=config, **kw)


def dev_metric(model: RankerModel, vocab: data.Vocabulary, lists, metric: str = "mrr@10") -> float:
    """Mean of ``metric`` after reranking ``lists`` in memory."""
    return metric_from_scorer(lists, lambda cl: score_candidates(model, vocab, cl), metric)


def metric_from_scorer(lists, scorer, metric: str = "mrr@10") -> float:
    """Mean ``metric`` when each list is ranked by ``scorer(candidate_list)``."""
    values = [metrics.compute_metric(metrics.sort_by_scores(cl, scorer(cl)), metric) for cl in lists]
    return math.fsum(values) / len(values)


# ---------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class Benchmark:
    """The default desk-scale experiment: corpus, model preset and trainer settings."""

    synth: synth.SynthConfig = synth.SynthConfig()
    preset: str = "tiny"
    head_variant: str = "encdec_token_logit"
    train: TrainConfig = TrainConfig(learning_rate=3e-3, batch_size=8)

    def model_config(self, vocab_size: int, seed: int) -> ModelConfig:
        variant = "generation_baseline" if self.train.loss == "generation" else self.head_variant
        return ModelConfig.preset(self.preset, vocab_size, head_variant=variant, seed=seed)

    def with_train(self, **changes) -> "Benchmark":
        return replace(self, train=replace(self.train, **changes))


@dataclass
class BenchmarkData:
    train_lists: list
    dev_lists: list
    vocab: data.Vocabulary
    extra_dev: dict = field(default_factory=dict)

    @classmethod
    def generate(cls, cfg: synth.SynthConfig, extra_domains: Sequence[str] = ("b",)) -> "BenchmarkData":
        extras = [replace(cfg, domain=d) for d in extra_domains]
        train_lists, dev_lists = synth.generate(cfg)
        vocab = synth.corpus_vocabulary([cfg, *extras])
        return cls(train_lists, dev_lists, vocab, {e.domain: synth.generate(e)[1] for e in extras})


@dataclass
class RunOutcome:
    label: str
    seed: int
    dev_mrr: float
    model: Optional[RankerModel] = None
    losses: list = field(default_factory=list)


def run_benchmark(bench: Benchmark, bdata: BenchmarkData, seed: int, out_dir=None, label: str = "") -> RunOutcome:
    cfg = replace(bench.train, seed=seed)
    model = RankerModel.init(bench.model_config(len(bdata.vocab.tokens), seed))
    corpus = EncodedCorpus.build(bdata.train_lists, bdata.vocab, cfg)
    result = train(model, cfg, corpus, out_dir=out_dir)
    return RunOutcome(label, seed, dev_metric(model, bdata.vocab, bdata.dev_lists), model, result.losses)


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    sweep: str
    config: str
    metric: str
    mean: float
    values: list
    status: str = "ok"


def sweep(
    kind: str,
    values: Sequence,
    bench: Benchmark,
    bdata: BenchmarkData,
    seeds: Sequence[int] = (0, 1, 2),
    out_dir=None,
    cache: Optional[dict] = None,
) -> list:
    """Train every (value, seed) pair; one row per (config, metric).

    ``kind`` is ``"loss"``, ``"list_size"`` or ``"model_size"``. A failing run
    is recorded in the row's status and the sweep moves on. ``cache`` maps
    ``(kind, value, seed)`` to an earlier :class:`RunOutcome`.
    """
    rows = []
    for value in values:
        if kind == "loss":
            b = bench.with_train(loss=value)
        elif kind == "list_size":
            b = bench.with_train(list_size=int(value))
        elif kind == "model_size":
            b = replace(bench, preset=value)
        else:
            raise ValueError(f"unknown sweep kind {kind!r}")
        scores, failures = [], []
        for seed in seeds:
            key = (kind, value, seed)
            try:
                if cache is not None and key in cache:
                    outcome = cache[key]
                else:
                    run_dir = None if out_dir is None else Path(out_dir) / f"{kind}-{value}-seed{seed}"
                    outcome = run_benchmark(b, bdata, seed, run_dir, label=f"{kind}={value}")
                    if cache is not None:
                        cache[key] = outcome
                scores.append(outcome.dev_mrr)
            except Exception as exc:  # recorded, sweep continues
                log.error("sweep %s=%s seed %s failed: %s", kind, value, seed, exc)
                failures.append(f"seed {seed}: {type(exc).__name__}: {exc}")
        mean = math.fsum(scores) / len(scores) if scores else float("nan")
        status = "ok" if not failures else ("failed: " if not scores else "partial: ") + "; ".join(failures)
        rows.append(SweepRow(kind, f"{kind}={value}", "mrr@10", mean, scores, status))
    if out_dir is not None:
        write_sweep(Path(out_dir), kind, rows)
    return rows


def write_sweep(out_dir: Path, kind: str, rows: Sequence[SweepRow]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"sweep_{kind}.tsv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["sweep", "config", "metric", "mean", "values", "status"])
        for r in rows:
            w.writerow([r.sweep, r.config, r.metric, repr(float(r.mean)), ",".join(repr(float(v)) for v in r.values), r.status])
    with open(out_dir / f"sweep_{kind}_plot.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([kind, "mrr@10"])
        for r in rows:
            w.writerow([r.config.split("=", 1)[1], repr(float(r.mean))])


# ---------------------------------------------------------------- zero-shot


def zeroshot_eval(model: RankerModel, vocab: data.Vocabulary, datasets: Mapping, out_dir=None) -> list:
    """NDCG@10 per dataset plus an ``Average`` row, without touching the model.

    ``datasets`` maps a name to a candidate-list path or an in-memory list.
    """
    before = model.fingerprint()
    rows = []
    for name, source in datasets.items():
        lists = list(data.read_candidates(source)) if isinstance(source, (str, Path)) else list(source)
        records, _ = rerank_lists(model, vocab, lists)
        qrels = data.qrels_from_candidates(lists)
        rankings, _ = rankings_for_eval(data.run_rankings(records), qrels, "zero")
        report = metrics.evaluate_rankings(rankings, ["ndcg@10"])["ndcg@10"]
        rows.append((name, report.mean))
    if rows:
        rows.append(("Average", math.fsum(v for _, v in rows) / len(rows)))
    if model.fingerprint() != before:
        raise RuntimeError("zero-shot evaluation modified the model parameters")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "zeroshot.tsv", "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            w.writerow(["dataset", "ndcg@10"])
            w.writerows((n, f"{v:.6f}") for n, v in rows)
        with open(out / "zeroshot.json", "w", encoding="utf-8") as f:
            json.dump({"checkpoint_sha256": before, "rows": [{"dataset": n, "ndcg@10": v} for n, v in rows]}, f, indent=2)
    return rows
