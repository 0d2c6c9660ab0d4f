"""Synthetic reranking corpora with a planted relevance signal.

Each query carries a two-word key phrase plus filler words. Its one relevant
document contains the key phrase; negatives are filler text that may repeat
the query's filler words, contain another query's key phrase, or share one
key word with the query. Word overlap alone is therefore a noisy signal,
while matching the key phrase is exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data
from .data import Candidate, CandidateList


@dataclass(frozen=True)
class SynthConfig:
    domain: str = "a"
    num_train: int = 500
    num_dev: int = 100
    candidates_per_query: int = 50
    train_candidates_per_query: int = 300
    num_key_words: int = 20
    num_filler_words: int = 60
    query_fillers: int = 2
    doc_length: int = 8
    # chance that a negative repeats each of the query's filler words;
    # higher values make word overlap a worse relevance signal
    overlap_prob: float = 0.08
    other_phrase_prob: float = 0.5
    partial_key_prob: float = 0.12
    seed: int = 0


def domain_words(cfg: SynthConfig) -> tuple:
    keys = [f"{cfg.domain}k{i}" for i in range(cfg.num_key_words)]
    fillers = [f"{cfg.domain}w{i}" for i in range(cfg.num_filler_words)]
    return keys, fillers


def _query(rng, keys, fillers, cfg):
    phrase = list(rng.choice(len(keys), size=2, replace=False))
    fill = list(rng.choice(len(fillers), size=cfg.query_fillers, replace=False))
    words = [fillers[i] for i in fill]
    at = int(rng.integers(len(words) + 1))
    text = words[:at] + [keys[phrase[0]], keys[phrase[1]]] + words[at:]
    return phrase, fill, " ".join(text)


def _insert(rng, words: list, block: list) -> list:
    at = int(rng.integers(len(words) + 1))
    return words[:at] + block + words[at:]


def _filler_text(rng, fillers, n: int) -> list:
    return [fillers[i] for i in rng.integers(len(fillers), size=n)]


def _candidate_list(rng, qid: str, keys, fillers, cfg: SynthConfig, n: int) -> CandidateList:
    phrase, fill, qtext = _query(rng, keys, fillers, cfg)
    texts, labels = [], []
    pos_words = _insert(rng, _filler_text(rng, fillers, cfg.doc_length - 2), [keys[phrase[0]], keys[phrase[1]]])
    texts.append(" ".join(pos_words))
    labels.append(1)
    others = [i for i in range(len(keys)) if i not in phrase]
    for _ in range(n - 1):
        block = []
        if rng.random() < cfg.partial_key_prob:
            block = [keys[phrase[int(rng.integers(2))]], keys[others[int(rng.integers(len(others)))]]]
        elif rng.random() < cfg.other_phrase_prob:
            a, b = rng.choice(len(others), size=2, replace=False)
            block = [keys[others[a]], keys[others[b]]]
        shared = [fillers[i] for i in fill if rng.random() < cfg.overlap_prob]
        words = _filler_text(rng, fillers, cfg.doc_length - len(block) - len(shared)) + shared
        rng.shuffle(words)
        texts.append(" ".join(_insert(rng, words, block)))
        labels.append(0)
    order = rng.permutation(n)
    cands = tuple(
        Candidate(f"{qid}d{j}", texts[j], labels[j], rank + 1) for rank, j in enumerate(order)
    )
    return CandidateList(qid, qtext, cands)


def generate(cfg: SynthConfig) -> tuple:
    """Return ``(train_lists, dev_lists)`` for one domain."""
    rng = np.random.default_rng([cfg.seed, sum(map(ord, cfg.domain))])
    keys, fillers = domain_words(cfg)
    train = [
        _candidate_list(rng, f"{cfg.domain}tr{i}", keys, fillers, cfg, cfg.train_candidates_per_query)
        for i in range(cfg.num_train)
    ]
    dev = [
        _candidate_list(rng, f"{cfg.domain}dev{i}", keys, fillers, cfg, cfg.candidates_per_query)
        for i in range(cfg.num_dev)
    ]
    return train, dev


def corpus_vocabulary(configs: Sequence[SynthConfig], num_sentinels: int = data.NUM_SENTINELS) -> data.Vocabulary:
    """Vocabulary covering every word the given domains can emit."""
    words = []
    for cfg in configs:
        keys, fillers = domain_words(cfg)
        words += keys + fillers
    size = len(data.special_tokens(num_sentinels)) + len(data.TEMPLATE_TOKENS) + len(set(words))
    return data.build_vocab([" ".join(words)], size, num_sentinels, reserved=data.TEMPLATE_TOKENS)


def overlap_scores(cl: CandidateList) -> np.ndarray:
    """Bag-of-words baseline: count of document tokens that occur in the query."""
    q = set(data.split_text(cl.query))
    return np.array([sum(t in q for t in data.split_text(c.text)) for c in cl.candidates], dtype=np.float64)


def write_corpus(
    out_dir, cfg: SynthConfig, extra_domains: Sequence[SynthConfig] = (), vocab: Optional[data.Vocabulary] = None
) -> dict:
    """Write train/dev JSONL, dev qrels and the shared vocabulary into ``out_dir``.

    Extra domains contribute dev-style files named ``<domain>.dev.jsonl``
    (used for zero-shot evaluation) and their words to the vocabulary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, dev = generate(cfg)
    paths = {
        "train": out / "train.jsonl",
        "dev": out / "dev.jsonl",
        "dev_qrels": out / "dev.qrels",
        "vocab": out / "vocab.tsv",
    }
    data.write_candidates(paths["train"], train)
    data.write_candidates(paths["dev"], dev)
    data.write_qrels(paths["dev_qrels"], data.qrels_from_candidates(dev))
    for extra in extra_domains:
        _, extra_dev = generate(extra)
        key = f"{extra.domain}.dev"
        paths[key] = out / f"{extra.domain}.dev.jsonl"
        paths[f"{key}_qrels"] = out / f"{extra.domain}.dev.qrels"
        data.write_candidates(paths[key], extra_dev)
        data.write_qrels(paths[f"{key}_qrels"], data.qrels_from_candidates(extra_dev))
    vocab = vocab or corpus_vocabulary([cfg, *extra_domains])
    vocab.save(paths["vocab"])
    manifest = {"config": asdict(cfg), "extra_domains": [asdict(e) for e in extra_domains]}
    with open(out / "synth.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return {k: str(v) for k, v in paths.items()}
