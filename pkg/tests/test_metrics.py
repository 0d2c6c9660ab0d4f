import itertools
import math

import numpy as np
import pytest
from scipy import stats

import oracles
from rankforge import metrics
from rankforge.metrics import RankedList


def ranked(labels, extra_relevant=0):
    """A ranked list whose i-th document carries ``labels[i]``."""
    rel = {f"d{i}": float(y) for i, y in enumerate(labels)}
    for j in range(extra_relevant):
        rel[f"unretrieved{j}"] = 1.0
    return RankedList(tuple(f"d{i}" for i in range(len(labels))), rel)


def label_vectors(max_len, grades):
    for n in range(1, max_len + 1):
        yield from itertools.product(grades, repeat=n)


# ---------------------------------------------------------------- brute force over all orderings


@pytest.mark.parametrize("grades", [(0, 1), (0, 1, 2, 3)], ids=["binary", "graded"])
def test_all_orderings_up_to_length_5_match_definitions(grades):
    # every label vector is one ordering of its multiset, so this covers all permutations
    worst = 0.0
    checked = 0
    for labels in label_vectors(5, grades):
        labels = list(labels)
        rl = ranked(labels)
        for k in range(1, 6):
            if max(labels) <= 1:
                worst = max(worst, abs(metrics.mrr_at_k(rl, k) - oracles.mrr(labels, k)))
            worst = max(worst, abs(metrics.ndcg_at_k(rl, k) - oracles.ndcg_bruteforce(labels, k)))
            worst = max(worst, abs(metrics.recall_at_k(rl, k) - oracles.recall(labels, k)))
        worst = max(worst, abs(metrics.ndcg_at_k(rl) - oracles.ndcg_bruteforce(labels)))
        worst = max(worst, abs(metrics.average_precision(rl) - oracles.average_precision(labels)))
        checked += 1
    assert checked == sum(len(grades) ** n for n in range(1, 6))
    assert worst <= 1e-12


def test_graded_mrr_counts_any_positive_grade():
    assert metrics.mrr_at_k(ranked([0, 0, 3, 1]), 10) == pytest.approx(1 / 3)


def test_unretrieved_relevant_documents_count_against_map_and_recall():
    for labels in label_vectors(4, (0, 1)):
        labels = list(labels)
        rl = ranked(labels, extra_relevant=2)
        total = sum(labels) + 2
        assert abs(metrics.average_precision(rl) - oracles.average_precision(labels, total)) <= 1e-12
        for k in (1, 3, 10):
            assert abs(metrics.recall_at_k(rl, k) - oracles.recall(labels, k, total)) <= 1e-12


def test_global_normalization_uses_every_judgment():
    rl = ranked([0, 1], extra_relevant=1)
    ideal = 1.0 + 1.0 / math.log2(3)
    assert metrics.ndcg_at_k(rl, normalization="global") == pytest.approx((1 / math.log2(3)) / ideal, rel=1e-14)
    assert metrics.ndcg_at_k(rl, normalization="list") == pytest.approx(1 / math.log2(3), rel=1e-14)


# ---------------------------------------------------------------- closed forms


def test_single_positive_at_rank_two():
    rl = ranked([0, 1, 0, 0, 0])
    assert metrics.ndcg_at_k(rl, 5) == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert metrics.mrr_at_k(rl, 10) == 0.5
    assert metrics.mrr_at_k(rl, 1) == 0.0
    assert metrics.average_precision(rl) == 0.5
    assert metrics.recall_at_k(rl, 1) == 0.0
    assert metrics.recall_at_k(rl, 2) == 1.0


def test_perfect_and_reversed_rankings():
    assert metrics.ndcg_at_k(ranked([3, 2, 1, 0])) == 1.0
    rev = metrics.ndcg_at_k(ranked([0, 1, 2, 3]))
    best = 7 + 3 / math.log2(3) + 1 / 2
    worst = 1 / math.log2(3) + 3 / 2 + 7 / math.log2(5)
    assert rev == pytest.approx(worst / best, rel=1e-14)


def test_map_two_hits():
    # hits at ranks 1 and 3: (1/1 + 2/3) / 2
    assert metrics.average_precision(ranked([1, 0, 1])) == pytest.approx(5 / 6, rel=1e-15)


# ---------------------------------------------------------------- properties


def test_metrics_bounded_and_zero_without_relevance():
    rng = np.random.default_rng(0)
    for _ in range(300):
        labels = rng.integers(0, 3, size=int(rng.integers(1, 12))).tolist()
        rl = ranked(labels)
        for name in ("mrr@10", "ndcg@5", "ndcg", "map", "recall@3"):
            v = metrics.compute_metric(rl, name)
            assert 0.0 <= v <= 1.0 + 1e-15
            if max(labels) == 0:
                assert v == 0.0


def test_swapping_relevant_up_never_hurts():
    rng = np.random.default_rng(1)
    for _ in range(300):
        labels = rng.integers(0, 3, size=6).tolist()
        i, j = sorted(rng.choice(6, size=2, replace=False))
        if labels[j] <= labels[i]:
            continue
        better = list(labels)
        better[i], better[j] = labels[j], labels[i]
        for name in ("ndcg", "ndcg@3", "map", "mrr@10"):
            assert metrics.compute_metric(ranked(better), name) >= metrics.compute_metric(ranked(labels), name) - 1e-15


def test_sort_by_scores_is_stable_on_ties():
    rl = metrics.sort_by_scores(["a", "b", "c", "d"], [0.5, 1.0, 0.5, 1.0])
    assert rl.doc_ids == ("b", "d", "a", "c")


def test_sort_by_scores_length_mismatch():
    with pytest.raises(ValueError, match="3 documents but 2 scores"):
        metrics.sort_by_scores(["a", "b", "c"], [1.0, 2.0])


def test_duplicate_doc_ids_rejected():
    with pytest.raises(ValueError, match="unique"):
        RankedList(("a", "a"), {"a": 1.0})


@pytest.mark.parametrize("name", ["mrr", "recall", "map@5", "bleu@3"])
def test_bad_metric_names(name):
    with pytest.raises(ValueError):
        metrics.parse_metric(name)


def test_zero_cutoff_rejected():
    with pytest.raises(ValueError):
        metrics.ndcg_at_k(ranked([1]), 0)


def test_empty_query_conventions():
    rankings = {"q1": ranked([0, 1]), "q2": ranked([0, 0])}
    zero = metrics.evaluate_rankings(rankings, ["mrr@10"], empty_queries="zero")["mrr@10"]
    drop = metrics.evaluate_rankings(rankings, ["mrr@10"], empty_queries="drop")["mrr@10"]
    assert zero.per_query == {"q1": 0.5, "q2": 0.0} and zero.mean == 0.25
    assert drop.per_query == {"q1": 0.5} and drop.mean == 0.5
    with pytest.raises(ValueError):
        metrics.evaluate_rankings(rankings, ["mrr@10"], empty_queries="skip")


# ---------------------------------------------------------------- paired t-test


def test_t_test_100_random_samples_match_oracle_and_scipy():
    rng = np.random.default_rng(42)
    worst_t = worst_p = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 40))
        a = rng.random(n)
        b = np.clip(a + rng.normal(rng.normal(0, 0.05), 0.1, size=n), 0, 1)
        t, p = metrics.paired_t_test(a, b)
        t_ref, p_ref = oracles.student_t_two_sided(a.tolist(), b.tolist())
        worst_t = max(worst_t, abs(t - t_ref))
        worst_p = max(worst_p, abs(p - p_ref))
        ref = stats.ttest_rel(a, b)
        assert t == pytest.approx(ref.statistic, abs=1e-6)
        assert p == pytest.approx(ref.pvalue, abs=1e-4)
    assert worst_t <= 1e-6
    assert worst_p <= 1e-4


def test_t_test_degenerate_cases():
    assert metrics.paired_t_test([0.1, 0.2, 0.3], [0.1, 0.2, 0.3]) == (0.0, 1.0)
    t, p = metrics.paired_t_test([1.5, 2.5, 3.5], [0.5, 1.5, 2.5])
    assert t == math.inf and p == 0.0
    t, p = metrics.paired_t_test([0.5, 1.5], [1.0, 2.0])
    assert t == -math.inf and p == 0.0
    with pytest.raises(ValueError):
        metrics.paired_t_test([0.1], [0.2])
    with pytest.raises(ValueError):
        metrics.paired_t_test([0.1, 0.2], [0.2])


def test_t_test_antisymmetric():
    rng = np.random.default_rng(3)
    a, b = rng.random(20), rng.random(20)
    t1, p1 = metrics.paired_t_test(a, b)
    t2, p2 = metrics.paired_t_test(b, a)
    assert t1 == -t2 and p1 == p2
