"""Candidate lists, tokenization, training-list sampling and file formats.

File formats:

* candidates: JSON lines, one query per line, ``{"query_id", "query",
  "candidates": [{"doc_id", "text", "label", "rank"}, ...]}``
* runs: TREC six columns ``qid Q0 docid rank score tag``
* qrels: TREC four columns ``qid 0 docid label``
* vocabulary: ``token<TAB>id`` per line
"""

from __future__ import annotations

import json
import logging
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
EMPTY = "<empty>"
TRUE = "<true>"
FALSE = "<false>"
NUM_SENTINELS = 100
DEFAULT_MAX_SEQ_LEN = 128

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class FormatError(ValueError):
    """A malformed line in an input file."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class SamplingError(ValueError):
    """A candidate list cannot yield a training list."""


# ---------------------------------------------------------------- domain types


@dataclass(frozen=True)
class Candidate:
    doc_id: str
    text: str
    label: int = 0
    rank: int = 0


@dataclass(frozen=True)
class CandidateList:
    query_id: str
    query: str
    candidates: tuple

    def __post_init__(self):
        cands = tuple(self.candidates)
        seen = set()
        for c in cands:
            if c.doc_id in seen:
                raise ValueError(f"duplicate doc {c.doc_id!r} in query {self.query_id!r}")
            seen.add(c.doc_id)
            if c.label not in (0, 1):
                raise ValueError(f"label {c.label!r} for doc {c.doc_id!r} is not binary")
        object.__setattr__(self, "candidates", cands)

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.candidates], dtype=np.float64)

    @property
    def doc_ids(self) -> list:
        return [c.doc_id for c in self.candidates]

    def positives(self) -> list:
        return [i for i, c in enumerate(self.candidates) if c.label > 0]

    def negatives(self) -> list:
        return [i for i, c in enumerate(self.candidates) if c.label == 0]


# ---------------------------------------------------------------- vocabulary


def sentinel(i: int) -> str:
    return f"<extra_id_{i}>"


class Vocabulary:
    """Token/id map with special tokens at fixed low ids.

    Ids 0..4 are pad, unknown, empty-document, and the true/false tokens used
    by the generation baseline; then ``num_sentinels`` unused sentinel tokens;
    then ordinary text tokens.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        for tok in (PAD, UNK, EMPTY, TRUE, FALSE):
            if tok not in self.index:
                raise ValueError(f"vocabulary is missing special token {tok}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def special_ids(self) -> set:
        return {i for i, t in enumerate(self.tokens) if t.startswith("<") and t.endswith(">")}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, tok in enumerate(self.tokens):
                f.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, sep, idx = line.rpartition("\t")
                if not sep or not idx.isdigit():
                    raise FormatError(path, line_no, "expected 'token<TAB>id'")
                if int(idx) != len(tokens):
                    raise FormatError(path, line_no, f"ids must be dense, expected {len(tokens)}")
                tokens.append(tok)
        return cls(tokens)


def special_tokens(num_sentinels: int = NUM_SENTINELS) -> list:
    return [PAD, UNK, EMPTY, TRUE, FALSE] + [sentinel(i) for i in range(num_sentinels)]


def split_text(text: str) -> list:
    """Lowercase, then split on whitespace and punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


TEMPLATE_TOKENS = ("query", ":", "document", "relevant")


def build_vocab(
    corpus: Iterable[str],
    size: int,
    num_sentinels: int = NUM_SENTINELS,
    reserved: Sequence[str] = (),
) -> Vocabulary:
    """Keep the most frequent tokens of ``corpus`` after the special tokens.

    ``reserved`` tokens are placed right after the specials regardless of
    frequency. Ties in frequency are broken by first appearance, so the result
    is deterministic for a given corpus order.
    """
    head = special_tokens(num_sentinels) + [t for t in dict.fromkeys(reserved)]
    if size < len(head) + 2:
        raise ValueError(f"vocab size {size} leaves no room beyond {len(head)} fixed tokens")
    counts: Counter = Counter()
    for text in corpus:
        counts.update(split_text(text))
    for tok in reserved:
        counts.pop(tok, None)
    # Counter.most_common is stable on insertion order for equal counts
    kept = [tok for tok, _ in counts.most_common(size - len(head))]
    return Vocabulary(head + kept)


def tokenize(text: str, vocab: Vocabulary) -> list:
    return [vocab.id(tok) for tok in split_text(text)]


def detokenize(token_ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in token_ids)


# ---------------------------------------------------------------- input sequences


@dataclass(frozen=True)
class InputSequence:
    text: str
    token_ids: tuple
    truncated: bool = False


def build_input(
    query: str,
    document: str,
    vocab: Vocabulary,
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN,
    with_postfix: bool = False,
) -> InputSequence:
    """Template ``Query: {q} Document: {d}`` (plus `` Relevant:``) and tokenize.

    Over-long inputs lose document tokens first, then query tokens; the
    template words are always kept.
    """
    if not query or not query.strip():
        raise ValueError("query text must be nonempty")
    q_toks = split_text(query)
    d_toks = split_text(document)
    empty_doc = not d_toks
    if empty_doc:
        warnings.warn("empty document text; using the empty-document token", stacklevel=2)
    fixed = 4 + (2 if with_postfix else 0)
    if max_seq_len < fixed + 2:
        raise ValueError(f"max_seq_len {max_seq_len} cannot hold the template")
    budget = max_seq_len - fixed
    body = len(q_toks) + max(len(d_toks), 1)
    truncated = body > budget
    if truncated:
        keep_q = min(len(q_toks), budget - 1)
        q_toks = q_toks[:keep_q]
        d_toks = d_toks[: budget - keep_q]
    doc_text = " ".join(d_toks) if truncated else document
    text = f"Query: {' '.join(q_toks) if truncated else query} Document: {doc_text}"
    if with_postfix:
        text += " Relevant:"
    ids = [vocab.id("query"), vocab.id(":")]
    ids += [vocab.id(t) for t in q_toks]
    ids += [vocab.id("document"), vocab.id(":")]
    ids += [vocab.index[EMPTY]] if empty_doc else [vocab.id(t) for t in d_toks]
    if with_postfix:
        ids += [vocab.id("relevant"), vocab.id(":")]
    return InputSequence(text, tuple(ids), truncated)


def encode_list(
    cl: CandidateList, vocab: Vocabulary, max_seq_len: int = DEFAULT_MAX_SEQ_LEN, with_postfix: bool = False
) -> list:
    """Token ids for every candidate of ``cl``, aligned with ``cl.candidates``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return [
            np.array(build_input(cl.query, c.text, vocab, max_seq_len, with_postfix).token_ids, dtype=np.int64)
            for c in cl.candidates
        ]


# ---------------------------------------------------------------- training lists


@dataclass(frozen=True)
class TrainingList:
    query_id: str
    token_ids: tuple
    labels: np.ndarray
    doc_indices: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.labels > 0))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_training_list(
    cl: CandidateList,
    m: int,
    seed=None,
    encoded: Optional[Sequence[np.ndarray]] = None,
    positive: str = "uniform",
) -> TrainingList:
    """One positive plus ``m - 1`` negatives drawn from ``cl``'s candidates.

    The positive is drawn uniformly among labelled positives (``positive=
    "first"`` takes the first one instead). Negatives are drawn uniformly
    without replacement, or with replacement when fewer than ``m - 1`` exist.
    """
    if m < 2:
        raise ValueError("list size m must be >= 2")
    pos = cl.positives()
    neg = cl.negatives()
    if not pos:
        raise SamplingError(f"query {cl.query_id!r} has no positive candidate")
    if not neg:
        raise SamplingError(f"query {cl.query_id!r} has no negative candidate")
    rng = _as_rng(seed)
    if positive == "uniform":
        p = pos[int(rng.integers(len(pos)))]
    elif positive == "first":
        p = pos[0]
    else:
        raise ValueError(f"unknown positive selection {positive!r}")
    replace = len(neg) < m - 1
    chosen = rng.choice(len(neg), size=m - 1, replace=replace)
    indices = np.array([p] + [neg[i] for i in chosen], dtype=np.int64)
    labels = np.zeros(m)
    labels[0] = 1.0
    if encoded is None:
        token_ids = tuple(cl.candidates[i].text for i in indices)
    else:
        token_ids = tuple(encoded[i] for i in indices)
    return TrainingList(cl.query_id, token_ids, labels, indices)


def upsample_pointwise(tl: TrainingList) -> TrainingList:
    """Repeat positives (cyclically) until they match the negative count.

    The result puts the positive block first, then negatives in sampled order.
    """
    pos = [i for i in range(len(tl)) if tl.labels[i] > 0]
    neg = [i for i in range(len(tl)) if tl.labels[i] <= 0]
    if not pos or len(pos) >= len(neg):
        order = pos + neg
    else:
        order = [pos[i % len(pos)] for i in range(len(neg))] + neg
    idx = np.array(order, dtype=np.int64)
    doc_indices = None if tl.doc_indices is None else tl.doc_indices[idx]
    return TrainingList(tl.query_id, tuple(tl.token_ids[i] for i in idx), tl.labels[idx], doc_indices)


# ---------------------------------------------------------------- file formats

PathLike = Union[str, Path]


def read_candidates(path: PathLike) -> Iterator[CandidateList]:
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                cands = tuple(
                    Candidate(str(c["doc_id"]), str(c["text"]), int(c.get("label", 0)), int(c.get("rank", i + 1)))
                    for i, c in enumerate(rec["candidates"])
                )
                yield CandidateList(str(rec["query_id"]), str(rec["query"]), cands)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(path, line_no, str(exc) or type(exc).__name__) from None


def write_candidates(path: PathLike, lists: Iterable[CandidateList]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for cl in lists:
            rec = {
                "query_id": cl.query_id,
                "query": cl.query,
                "candidates": [
                    {"doc_id": c.doc_id, "text": c.text, "label": c.label, "rank": c.rank} for c in cl.candidates
                ],
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class RunRecord:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str = "rankforge"


def format_run_line(r: RunRecord) -> str:
    # repr is the shortest text that parses back to the same float
    return f"{r.query_id} Q0 {r.doc_id} {r.rank} {float(r.score)!r} {r.tag}"


def write_run(path: PathLike, records: Iterable[RunRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(format_run_line(r) + "\n")
            n += 1
    return n


def parse_run_line(line: str) -> RunRecord:
    parts = line.split()
    if len(parts) != 6:
        raise ValueError(f"expected 6 columns, got {len(parts)}")
    qid, _q0, doc, rank, score, tag = parts
    return RunRecord(qid, doc, int(rank), float(score), tag)


def read_run(path: PathLike) -> list:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = parse_run_line(line)
            except ValueError as exc:
                raise FormatError(path, line_no, str(exc)) from None
            key = (rec.query_id, rec.doc_id)
            if key in seen:
                raise FormatError(path, line_no, f"duplicate doc {rec.doc_id!r} for query {rec.query_id!r}")
            seen.add(key)
            records.append(rec)
    return records


def run_rankings(records: Iterable[RunRecord]) -> dict:
    """Group run records into ``{qid: [doc ids by rank]}``."""
    grouped: dict = {}
    for r in records:
        grouped.setdefault(r.query_id, []).append(r)
    return {qid: [r.doc_id for r in sorted(rs, key=lambda r: r.rank)] for qid, rs in grouped.items()}


def read_qrels(path: PathLike) -> dict:
    qrels: dict = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(path, line_no, f"expected 4 columns, got {len(parts)}")
            qid, _iter, doc, label = parts
            try:
                value = int(label)
            except ValueError:
                raise FormatError(path, line_no, f"label {label!r} is not an integer") from None
            docs = qrels.setdefault(qid, {})
            if doc in docs:
                raise FormatError(path, line_no, f"duplicate doc {doc!r} for query {qid!r}")
            docs[doc] = value
    return qrels


def write_qrels(path: PathLike, qrels: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid, docs in qrels.items():
            for doc, label in docs.items():
                f.write(f"{qid} 0 {doc} {int(label)}\n")


def qrels_from_candidates(lists: Iterable[CandidateList]) -> dict:
    return {cl.query_id: {c.doc_id: c.label for c in cl.candidates if c.label > 0} for cl in lists}
