"""``rankforge`` command line: synth, train, rerank, eval, sweep, zeroshot, gradcheck.

Every subcommand takes ``--config file.json`` (flat keys named like the long
flags, with dashes as underscores); explicit flags override the file.
Outputs go only under ``--out-dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data, experiments, gradcheck, synth
from .model import HEAD_VARIANTS, POOLINGS, PRESETS, ModelConfig, RankerModel
from .train import OPTIMIZERS, TRAIN_LOSSES, EncodedCorpus, TrainConfig, TrainingDiverged, train

log = logging.getLogger("rankforge")


class UsageError(Exception):
    pass


def inside(out_dir: Path, name: str) -> Path:
    """Resolve ``name`` under ``out_dir``, refusing anything that escapes it."""
    root = out_dir.resolve()
    path = (root / name).resolve()
    if root != path and root not in path.parents:
        raise UsageError(f"output name {name!r} would leave --out-dir {out_dir}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    cfg = synth.SynthConfig(
        domain=args.domain,
        num_train=args.num_train,
        num_dev=args.num_dev,
        candidates_per_query=args.candidates_per_query,
        train_candidates_per_query=args.train_candidates_per_query,
        overlap_prob=args.overlap_prob,
        seed=args.seed,
    )
    extras = [replace(cfg, domain=d) for d in args.extra_domains]
    paths = synth.write_corpus(out, cfg, extras)
    _, dev = synth.generate(cfg)
    band = experiments.metric_from_scorer(dev, synth.overlap_scores)
    print(json.dumps({"files": paths, "overlap_mrr@10": band}, indent=2))
    return 0


def _model_config(args, vocab_size: int) -> ModelConfig:
    overrides = {"head_variant": args.head_variant, "pooling": args.pooling, "seed": args.seed}
    if args.loss == "generation":
        overrides["head_variant"] = "generation_baseline"
    if args.target_token is not None:
        overrides["target_token_id"] = args.target_token
    return ModelConfig.preset(args.preset, vocab_size, **overrides)


def cmd_train(args) -> int:
    out = _out_dir(args)
    vocab = data.Vocabulary.load(args.vocab)
    cfg = TrainConfig(
        loss=args.loss,
        epsilon=args.epsilon,
        list_size=args.list_size,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        steps=args.steps,
        seed=args.seed,
        eval_every=args.eval_every,
        optimizer=args.optimizer,
        positive=args.positive,
        with_postfix=args.with_postfix,
    )
    model = RankerModel.init(_model_config(args, len(vocab.tokens)))
    corpus = EncodedCorpus.build(list(data.read_candidates(args.train)), vocab, cfg)
    if corpus.skipped:
        log.warning("%d training queries lack a positive or a negative and were skipped", corpus.skipped)
    dev = list(data.read_candidates(args.dev)) if args.dev else None
    evaluate = (lambda m: experiments.dev_metric(m, vocab, dev)) if dev else None
    try:
        result = train(model, cfg, corpus, out_dir=out, evaluate=evaluate, log=print)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = {"checkpoint": result.checkpoints[-1], "final_loss": result.losses[-1]}
    if dev:
        summary["dev_mrr@10"] = experiments.dev_metric(model, vocab, dev)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_rerank(args) -> int:
    out = _out_dir(args)
    model = RankerModel.load(args.checkpoint)
    vocab = data.Vocabulary.load(args.vocab)
    info = experiments.rerank(
        model, vocab, args.candidates, inside(out, args.run_name), args.top_k, args.tag, args.with_postfix
    )
    for qid in info["skipped"]:
        print(f"warning: query {qid} has no candidates", file=sys.stderr)
    print(f"wrote {info['lines']} lines to {inside(out, args.run_name)}")
    if args.dump_vocab_logits:
        path = inside(out, "vocab_logits.tsv")
        rows = dump_vocab_logits(model, vocab, args.candidates, path, args.dump_vocab_logits)
        print(f"wrote top-{args.dump_vocab_logits} vocabulary logits for {rows} candidates to {path}")
    return 0


def dump_vocab_logits(model: RankerModel, vocab: data.Vocabulary, candidates, path, top: int) -> int:
    """Top vocabulary logits of the decoder step for the first query's candidates."""
    if not model.config.uses_decoder:
        raise UsageError(f"{model.config.head_variant} has no decoder, so there are no vocabulary logits")
    cl = next(iter(data.read_candidates(candidates)), None)
    if cl is None or not cl.candidates:
        return 0
    seqs = data.encode_list(cl, vocab, model.config.max_seq_len)
    logits = model.vocab_logits(seqs).data
    with open(path, "w", encoding="utf-8") as f:
        f.write("query_id\tdoc_id\ttarget_logit\ttop_tokens\n")
        for c, row in zip(cl.candidates, logits):
            best = np.argsort(-row, kind="stable")[:top]
            tokens = " ".join(f"{vocab.tokens[i]}={float(row[i])!r}" for i in best)
            f.write(f"{cl.query_id}\t{c.doc_id}\t{float(row[model.config.target_token_id])!r}\t{tokens}\n")
    return len(cl.candidates)


def cmd_eval(args) -> int:
    out = _out_dir(args)
    result = experiments.evaluate_files(
        args.run,
        args.qrels,
        args.metrics,
        args.baseline,
        empty_queries=args.empty_queries,
        normalization=args.normalization,
    )
    result.to_json(inside(out, f"{args.name}.json"))
    result.to_tsv(inside(out, f"{args.name}.tsv"))
    missing = result.diagnostics["missing_from_qrels"]
    if missing:
        print(f"warning: {len(missing)} run queries missing from qrels ({args.empty_queries})", file=sys.stderr)
    for row in result.table_rows():
        print("\t".join(row))
    return 0


def _benchmark(args) -> experiments.Benchmark:
    scfg = replace(synth.SynthConfig(), seed=args.data_seed)
    tcfg = replace(
        experiments.Benchmark().train,
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        loss=args.loss,
    )
    return experiments.Benchmark(synth=scfg, preset=args.preset, train=tcfg)


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    bench = _benchmark(args)
    bdata = experiments.BenchmarkData.generate(bench.synth, extra_domains=())
    values = args.values or {
        "loss": list(TRAIN_LOSSES),
        "list_size": list(experiments.LIST_SIZES),
        "model_size": list(experiments.MODEL_PRESETS),
    }[args.kind]
    if args.kind == "list_size":
        values = [int(v) for v in values]
    rows = experiments.sweep(args.kind, values, bench, bdata, args.seeds, out_dir=out)
    for r in rows:
        print(f"{r.config}\t{r.metric}\t{r.mean:.4f}\t{r.status}")
    return 0 if all(r.status == "ok" for r in rows) else 1


def cmd_zeroshot(args) -> int:
    out = _out_dir(args)
    model = RankerModel.load(args.checkpoint)
    vocab = data.Vocabulary.load(args.vocab)
    datasets = {}
    for spec in args.datasets:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        datasets[name] = path
    rows = experiments.zeroshot_eval(model, vocab, datasets, out)
    for name, value in rows:
        print(f"{name}\t{value:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed, args.lists, args.instances)
    for r in results:
        print(r.line())
    worst_loss = max(r.max_error for r in results if r.name.startswith("loss/"))
    worst_model = max(r.max_error for r in results if r.name.startswith("model/"))
    print(f"max relative error: losses {worst_loss:.3e}, end-to-end {worst_model:.3e}")
    if args.out_dir:
        out = _out_dir(args)
        with open(inside(out, "gradcheck.json"), "w", encoding="utf-8") as f:
            json.dump([asdict(r) | {"passed": r.passed} for r in results], f, indent=2)
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- parser


def _add_train_flags(p, defaults: TrainConfig) -> None:
    p.add_argument("--loss", choices=TRAIN_LOSSES, default=defaults.loss)
    p.add_argument("--steps", type=int, default=defaults.steps)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--learning-rate", type=float, default=defaults.learning_rate)
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rankforge", description="Desk-scale learning-to-rank toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic reranking corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", default="a")
    p.add_argument("--extra-domains", nargs="*", default=["b"], help="held-out domains for zero-shot files")
    d = synth.SynthConfig()
    p.add_argument("--num-train", type=int, default=d.num_train)
    p.add_argument("--num-dev", type=int, default=d.num_dev)
    p.add_argument("--candidates-per-query", type=int, default=d.candidates_per_query)
    p.add_argument("--train-candidates-per-query", type=int, default=d.train_candidates_per_query)
    p.add_argument("--overlap-prob", type=float, default=d.overlap_prob)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a ranker")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train", required=True, help="training candidates (JSONL)")
    p.add_argument("--dev", help="dev candidates (JSONL) for MRR@10 tracking")
    p.add_argument("--vocab", required=True)
    _add_train_flags(p, TrainConfig())
    t = TrainConfig()
    p.add_argument("--epsilon", type=float, default=t.epsilon)
    p.add_argument("--list-size", type=int, default=t.list_size)
    p.add_argument("--eval-every", type=int, default=t.eval_every)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default=t.optimizer)
    p.add_argument("--positive", choices=("uniform", "first"), default=t.positive)
    p.add_argument("--with-postfix", action="store_true")
    p.add_argument("--head-variant", choices=HEAD_VARIANTS, default="encdec_token_logit")
    p.add_argument("--pooling", choices=POOLINGS, default="first")
    p.add_argument("--target-token", type=int, default=None, help="vocabulary id of the scoring token")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="score candidates and write a TREC run")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--run-name", default="run.trec")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--tag", default="rankforge")
    p.add_argument("--with-postfix", action="store_true")
    p.add_argument("--dump-vocab-logits", type=int, default=0, metavar="K",
                   help="debug: write the top-K vocabulary logits for the first query's candidates")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="evaluate a TREC run against qrels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--baseline", help="baseline run for paired t-tests")
    p.add_argument("--metrics", nargs="+", default=list(experiments.DEFAULT_METRICS))
    p.add_argument("--empty-queries", choices=("zero", "drop"), default="zero")
    p.add_argument("--normalization", choices=("list", "global"), default="list")
    p.add_argument("--name", default="result")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="list-size, loss or model-size sweep on the synthetic benchmark")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kind", choices=("loss", "list_size", "model_size"), required=True)
    p.add_argument("--values", nargs="*", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--data-seed", type=int, default=0)
    _add_train_flags(p, experiments.Benchmark().train)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("zeroshot", help="NDCG@10 table over held-out candidate files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--datasets", nargs="+", required=True, help="NAME=PATH or PATH")
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lists", type=int, default=200)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_gradcheck)

    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.add_argument("--config", help="JSON file of flag defaults")
    return parser


def _subparsers(parser) -> dict:
    for action in parser._subparsers._group_actions:
        return action.choices
    return {}


# flags that must be typed explicitly even when a config file is given
ALWAYS_EXPLICIT = {"train": {"seed"}}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in _subparsers(parser)), None)
    if known.config and command:
        with open(known.config, encoding="utf-8") as f:
            values = json.load(f)
        if not isinstance(values, dict):
            raise UsageError("config file must hold a flat JSON object")
        sp = _subparsers(parser)[command]
        known_dests = {a.dest for a in sp._actions}
        unknown = sorted(set(values) - known_dests)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        for a in sp._actions:
            if a.dest in values and a.dest not in ALWAYS_EXPLICIT.get(command, ()):
                a.required = False
        sp.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except (UsageError, data.FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
