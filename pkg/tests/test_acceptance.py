"""The eight acceptance criteria, each at its stated tolerance.

Run alone with ``pytest tests/test_acceptance.py -v``; one PASS/FAIL line per
criterion is printed in the terminal summary. Criteria 4, 5 and 8 share a
session cache of 2,000-step training runs (about 20 minutes on one core).
"""

import functools
import hashlib
import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import record_criterion
from rankforge import data, experiments, gradcheck, losses, metrics, synth
from rankforge import train as T
from rankforge.losses import LabeledScores, Poly1Config
from rankforge.metrics import RankedList
from rankforge.model import ModelConfig, RankerModel, generation_score

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def criterion(number):
    """Record an unexpected exception as a failed criterion before re-raising."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except AssertionError:
                raise
            except Exception as exc:
                record_criterion(number, False, f"error {type(exc).__name__}: {exc}")
                raise

        return run

    return wrap


def check(number, passed, detail):
    print(record_criterion(number, passed, detail))
    assert passed, detail


# ---------------------------------------------------------------- shared benchmark runs


class BenchmarkRuns:
    def __init__(self):
        self.bench = experiments.Benchmark()
        t = time.perf_counter()
        self.data = experiments.BenchmarkData.generate(self.bench.synth, extra_domains=("b",))
        self.setup_seconds = time.perf_counter() - t
        self.outcomes = {}
        self.seconds = {}

    def get(self, loss, list_size, seed):
        key = (loss, list_size, seed)
        if key not in self.outcomes:
            t = time.perf_counter()
            b = self.bench.with_train(loss=loss, list_size=list_size)
            self.outcomes[key] = experiments.run_benchmark(b, self.data, seed, label=f"{loss}/m={list_size}")
            self.seconds[key] = time.perf_counter() - t
        return self.outcomes[key]


@pytest.fixture(scope="session")
def runs():
    return BenchmarkRuns()


# ---------------------------------------------------------------- 1


@criterion(1)
def test_criterion_1_gradient_suite():
    t = time.perf_counter()
    results = gradcheck.run_all(seed=0, num_lists=200, instances=20)
    seconds = time.perf_counter() - t
    loss_rows = [r for r in results if r.name.startswith("loss/")]
    model_rows = [r for r in results if r.name.startswith("model/")]
    combos = {tuple(r.name.split("/")[1:]) for r in model_rows}
    expected = set(itertools.product(("encdec_token_logit", "enc_pool_dense", "generation_baseline"),
                                     ("pointce", "pair", "softmax", "poly1")))
    worst_loss = max(r.max_error for r in loss_rows)
    worst_model = max(r.max_error for r in model_rows)
    passed = (
        {r.name for r in loss_rows} == {f"loss/{n}" for n in ("pointce", "pair", "softmax", "poly1")}
        and all(r.instances == 200 for r in loss_rows)
        and combos == expected
        and all(r.instances == 20 for r in model_rows)
        and worst_loss <= 1e-5
        and worst_model <= 1e-4
        and seconds < 120
    )
    check(1, passed, f"losses max rel err {worst_loss:.2e} (<= 1e-5), end-to-end {worst_model:.2e} (<= 1e-4) "
                     f"over {len(model_rows)} head x loss pairs, {seconds:.1f}s (< 120s)")


# ---------------------------------------------------------------- 2


ORACLES = {
    "pointce": oracles.point_ce,
    "pair": oracles.pair_logistic,
    "softmax": oracles.softmax_ce,
    "poly1": lambda y, s: oracles.poly1(y, s, 1),
}


def rel(a, b):
    a, b = np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(b, float))
    scale = np.linalg.norm(b)
    return np.linalg.norm(a - b) / scale if scale > 0 else np.linalg.norm(a - b)


@criterion(2)
def test_criterion_2_loss_oracles():
    rng = np.random.default_rng(2024)
    worst = {name: 0.0 for name in ORACLES}
    bitwise = True
    for i in range(1000):
        m = int(rng.integers(1, 11))
        binary = (rng.random(m) < 0.4).astype(float)
        if binary.sum() == 0:
            binary[int(rng.integers(m))] = 1.0
        graded = rng.integers(0, 4, size=m).astype(float)
        scores = rng.normal(0, 3, size=m)
        for name, oracle in ORACLES.items():
            labels = binary if name == "pointce" or i % 2 == 0 else graded
            out = losses.list_loss(LabeledScores(labels, scores), name, Poly1Config(1.0))
            value, grad = oracle(labels.tolist(), scores.tolist())
            err = max(rel(out.value, float(value)), rel(out.grad, [float(g) for g in grad]))
            worst[name] = max(worst[name], err)
        for labels in (binary, graded):
            case = LabeledScores(labels, scores)
            a, b = losses.poly1_softmax_ce(case, Poly1Config(0.0)), losses.softmax_ce(case)
            bitwise &= a.value == b.value and a.grad.tobytes() == b.grad.tobytes()
    passed = all(v <= 1e-12 for v in worst.values()) and bitwise
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    check(2, passed, f"1000 lists m<=10, max rel err {summary} (<= 1e-12); poly1(eps=0) == softmax bitwise: {bitwise}")


# ---------------------------------------------------------------- 3


@criterion(3)
def test_criterion_3_metric_oracles():
    worst = 0.0
    lists = 0
    for grades in ((0, 1), (0, 1, 2, 3)):
        for n in range(1, 6):
            for labels in itertools.product(grades, repeat=n):
                labels = list(labels)
                rl = RankedList(tuple(f"d{i}" for i in range(n)), {f"d{i}": float(y) for i, y in enumerate(labels)})
                for k in range(1, 6):
                    if max(labels) <= 1:
                        worst = max(worst, abs(metrics.mrr_at_k(rl, k) - oracles.mrr(labels, k)))
                    worst = max(worst, abs(metrics.ndcg_at_k(rl, k) - oracles.ndcg_bruteforce(labels, k)))
                    worst = max(worst, abs(metrics.recall_at_k(rl, k) - oracles.recall(labels, k)))
                worst = max(worst, abs(metrics.ndcg_at_k(rl) - oracles.ndcg_bruteforce(labels)))
                worst = max(worst, abs(metrics.average_precision(rl) - oracles.average_precision(labels)))
                lists += 1
    rank2 = RankedList(tuple("abcde"), {"b": 1.0})
    closed = abs(metrics.ndcg_at_k(rank2, 5) - 1 / math.log2(3))
    passed = worst <= 1e-12 and closed <= 1e-12
    check(3, passed, f"{lists} orderings (binary and graded, length <= 5), max abs err {worst:.1e} (<= 1e-12); "
                     f"NDCG@5 rank-2 closed form err {closed:.1e}")


# ---------------------------------------------------------------- 4


@criterion(4)
def test_criterion_4_softmax_vs_pointce(runs):
    t = time.perf_counter()
    soft = [runs.get("softmax", 36, s).dev_mrr for s in SEEDS]
    point = [runs.get("pointce", 36, s).dev_mrr for s in SEEDS]
    seconds = time.perf_counter() - t + runs.setup_seconds
    ms, mp = float(np.mean(soft)), float(np.mean(point))
    passed = ms >= mp - 0.01 and ms >= 0.85 and seconds < 15 * 60
    detail = (f"dev MRR@10 softmax {ms:.4f} {[round(v, 4) for v in soft]}, pointce {mp:.4f} "
              f"{[round(v, 4) for v in point]}; need softmax >= pointce - 0.01 and softmax >= 0.85; "
              f"{seconds / 60:.1f} min (< 15)")
    check(4, passed, detail)


# ---------------------------------------------------------------- 5


@criterion(5)
def test_criterion_5_list_size_sweep(runs):
    means = {}
    for m in experiments.LIST_SIZES:
        means[m] = float(np.mean([runs.get("softmax", m, s).dev_mrr for s in SEEDS]))
    passed = means[36] >= means[5] - 0.02
    curve = ", ".join(f"m={m}: {v:.4f}" for m, v in means.items())
    check(5, passed, f"softmax dev MRR@10 3-seed means {curve}; need m=36 >= m=5 - 0.02")


# ---------------------------------------------------------------- 6


@criterion(6)
def test_criterion_6_generation_baseline():
    rng = np.random.default_rng(6)
    # float64 logistic is strictly increasing only while it has not rounded to 0 or 1
    z_pos, z_neg = rng.uniform(-15, 15, size=1000), rng.uniform(-15, 15, size=1000)
    margin = z_pos - z_neg
    order = np.argsort(margin)
    scores = generation_score(z_pos, z_neg)[order]
    distinct = np.diff(margin[order]) > 0
    strictly = bool(np.all(np.diff(scores)[distinct] > 0))
    equal = generation_score(z_pos, z_pos)
    half = bool(np.all(equal == 0.5))
    # the model's score is the same function of its own logit margin
    model = RankerModel.init(ModelConfig(vocab_size=120, model_dim=8, num_heads=2, ff_dim=16, max_seq_len=12,
                                         head_variant="generation_baseline", seed=6))
    ids = rng.integers(5, 120, size=(50, 8))
    m = model.forward(ids, quantity="margin").data
    consistent = float(np.max(np.abs(model.scores(list(ids)) - 1 / (1 + np.exp(-m)))))
    passed = strictly and half and consistent <= 1e-15
    check(6, passed, f"1000 samples strictly monotone in z_pos - z_neg: {strictly}; score 0.5 at equality: {half}; "
                     f"model score vs sigmoid(margin) max diff {consistent:.1e}")


# ---------------------------------------------------------------- 7


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@criterion(7)
def test_criterion_7_determinism_and_io(tmp_path):
    cfg = synth.SynthConfig(num_train=60, num_dev=10)
    bench = experiments.Benchmark(synth=cfg).with_train(steps=40)
    bdata = experiments.BenchmarkData.generate(cfg, extra_domains=())
    digests = []
    for name in ("first", "second"):
        out = tmp_path / name
        outcome = experiments.run_benchmark(bench, bdata, seed=11, out_dir=out)
        records, _ = experiments.rerank_lists(outcome.model, bdata.vocab, bdata.dev_lists)
        data.write_run(out / "dev.trec", records)
        digests.append({f: sha(out / f) for f in ("final.ckpt", "loss.csv", "dev.trec")})
    identical = digests[0] == digests[1]

    run_path = tmp_path / "first" / "dev.trec"
    records = data.read_run(run_path)
    data.write_run(tmp_path / "again.trec", records)
    run_lossless = (tmp_path / "again.trec").read_bytes() == run_path.read_bytes() and records == data.read_run(
        tmp_path / "again.trec")
    scores_exact = all(
        r.score == float(s) for r, s in zip(records, (line.split()[4] for line in run_path.read_text().splitlines()))
    )
    qrels = {cl.query_id: {c.doc_id: c.label for c in cl.candidates} for cl in bdata.dev_lists}
    data.write_qrels(tmp_path / "dev.qrels", qrels)
    qrels_lossless = data.read_qrels(tmp_path / "dev.qrels") == qrels

    rng = np.random.default_rng(7)
    worst_t = worst_p = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 50))
        a = rng.random(n)
        b = np.clip(a + rng.normal(rng.normal(0, 0.05), 0.1, size=n), 0, 1)
        t, p = metrics.paired_t_test(a, b)
        t_ref, p_ref = oracles.student_t_two_sided(a.tolist(), b.tolist())
        worst_t, worst_p = max(worst_t, abs(t - t_ref)), max(worst_p, abs(p - p_ref))
    passed = identical and run_lossless and scores_exact and qrels_lossless and worst_t <= 1e-6 and worst_p <= 1e-4
    check(7, passed, f"repeated seeded runs bit-identical (checkpoint, loss curve, run file): {identical}; "
                     f"run round-trip lossless: {run_lossless and scores_exact}; qrels: {qrels_lossless}; "
                     f"t-test vs oracle |dt| {worst_t:.1e} (<= 1e-6), |dp| {worst_p:.1e} (<= 1e-4)")


# ---------------------------------------------------------------- 8


@criterion(8)
def test_criterion_8_zero_shot(runs, tmp_path):
    model = runs.get("softmax", 36, 0).model
    ckpt = tmp_path / "domain_a.ckpt"
    model.save(ckpt)
    before = sha(ckpt)
    words_a = {w for cl in runs.data.train_lists for c in cl.candidates for w in c.text.split()}
    words_b = {w for cl in runs.data.extra_dev["b"] for c in cl.candidates for w in c.text.split()}
    disjoint = not words_a & words_b
    loaded = RankerModel.load(ckpt)
    data.write_candidates(tmp_path / "b.dev.jsonl", runs.data.extra_dev["b"])
    rows = experiments.zeroshot_eval(loaded, runs.data.vocab, {"B": tmp_path / "b.dev.jsonl"}, tmp_path / "report")
    loaded.save(tmp_path / "after.ckpt")
    unchanged = sha(tmp_path / "after.ckpt") == before
    table = (tmp_path / "report" / "zeroshot.tsv").read_text().splitlines()
    shaped = table[0] == "dataset\tndcg@10" and [n for n, _ in rows] == ["B", "Average"] and len(table) == 3
    bounded = all(0.0 <= v <= 1.0 for _, v in rows)
    passed = disjoint and unchanged and shaped and bounded
    values = ", ".join(f"{n} {v:.4f}" for n, v in rows)
    check(8, passed, f"domain A model on disjoint-vocabulary domain B: NDCG@10 {values}; in [0,1]: {bounded}; "
                     f"report shaped: {shaped}; checkpoint hash unchanged: {unchanged}; vocab disjoint: {disjoint}")


# ---------------------------------------------------------------- related budget property (not a numbered criterion)


def test_softmax_training_loss_falls_below_tenth_of_log_m(runs):
    bound = 0.1 * math.log(36)
    for seed in SEEDS:
        curve = runs.get("softmax", 36, seed).losses
        tail = float(np.mean(curve[-100:]))
        assert tail < bound, f"seed {seed}: mean loss of the last 100 steps {tail:.4f} >= {bound:.4f}"
