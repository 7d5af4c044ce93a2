"""Command-line entry point: ``ssan {train,eval,bench,count-params,gradcheck,selftest}``.

Exit status is 0 on success, 1 when a check or validation fails, and 2 on
usage, I/O or parse errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, data, gradcheck, selftest
from .attention import AttentionSpec
from .errors import DimMismatch, EmptySentence, MalformedLine, ParseError, SSANError, UnknownLabel
from .model import Arch, ModelSpec, init_params, save_checkpoint, load_checkpoint
from .train import TrainConfig, default_learning_rate, evaluate, read_config_file, run_protocol

log = logging.getLogger("ssan")

IO_ERRORS = (OSError, ParseError, UnknownLabel, EmptySentence, MalformedLine, DimMismatch,
             KeyError)


class UsageError(Exception):
    pass


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=[a.value for a in Arch], default="ssan1")
    p.add_argument("--pos", choices=["none", "pe", "learned", "rpr"], default="rpr")
    p.add_argument("--dmodel", type=int, default=300)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--max-len", type=int, default=256)
    p.add_argument("--vocab-size", type=int, default=None)


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", type=Path)
    p.add_argument("--dev", type=Path)
    p.add_argument("--test", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--embeddings", type=Path)
    p.add_argument("--freeze-embeddings", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the multi-seed training protocol")
    _model_flags(p)
    _data_flags(p)
    p.add_argument("--config", type=Path)
    p.add_argument("--optimizer", choices=["adadelta", "adam"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batches", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("eval", help="accuracy of a saved checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("bench", help="parameter count and timing table")
    _model_flags(p)
    _data_flags(p)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--passes", type=int, default=10)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--synthetic", type=int, nargs=2, metavar=("TRAIN", "DEV"), default=(320, 96),
                   help="sizes of random corpora used when --train/--dev are absent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("count-params", help="closed-form trainable parameter count")
    _model_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("selftest", help="built-in invariants")
    return parser


def spec_from_args(args, n_classes: int | None = None, vocab_size: int | None = None) -> ModelSpec:
    classes = args.classes or n_classes
    if classes is None:
        raise UsageError("--classes is required without a labels file")
    arch = Arch(args.arch)
    heads = args.heads or (6 if arch is Arch.TRANSFORMER and args.dmodel % 6 == 0 else 1)
    att = AttentionSpec(args.dmodel, heads=heads, position=args.pos, clip_k=args.k)
    kw = {}
    if args.dropout is not None:
        kw["dropout_rate"] = args.dropout
    return ModelSpec(arch, args.dmodel, classes, att, ffn_inner_dim=args.ffn_dim,
                     l2_lambda=args.l2, vocab_size=args.vocab_size or vocab_size,
                     max_len=args.max_len, **kw)


def _load_splits(args, need=("train", "dev")):
    if args.labels is None:
        raise UsageError("--labels is required")
    corpora = {}
    for split in ("train", "dev", "test"):
        path = getattr(args, split)
        if path is None:
            if split in need:
                raise UsageError(f"--{split} is required")
            continue
        corpora[split] = data.load_corpus(path, args.labels, split=split)
    vocab = data.Vocabulary.build(corpora.values())
    return corpora, vocab


def _embeddings(args, vocab, d_model, seed):
    if args.embeddings is None:
        return None
    emb = data.load_embeddings(args.embeddings, vocab, dim=d_model, rng=seed)
    log.info("embedding coverage %.3f", emb.coverage)
    return emb.matrix


def cmd_train(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    overrides = {"optimizer": args.optimizer, "learning_rate": args.lr,
                 "total_batches": args.batches, "batch_size": args.batch_size,
                 "eval_interval": args.eval_interval, "runs": args.runs, "seed": args.seed,
                 "dropout_rate": args.dropout}
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    if "learning_rate" not in values:
        values["learning_rate"] = str(default_learning_rate(args.dmodel))
    config = TrainConfig.from_mapping(values)
    corpora, vocab = _load_splits(args)
    spec = spec_from_args(args, corpora["train"].n_classes, len(vocab))
    encoded = {k: data.encode(c, vocab) for k, c in corpora.items()}
    report = run_protocol(spec, config, encoded["train"], encoded["dev"], encoded.get("test"),
                          embeddings=_embeddings(args, vocab, spec.d_model, config.seed),
                          train_embeddings=not args.freeze_embeddings)
    table = report.to_tsv()
    sys.stdout.write(table)
    if args.out:
        args.out.write_text(table, encoding="utf-8")
    if args.checkpoint and report.best_params is not None:
        save_checkpoint(args.checkpoint, spec, report.best_params, vocab.tokens)
    return 0


def cmd_eval(args) -> int:
    spec, params, tokens = load_checkpoint(args.checkpoint)
    if tokens is None:
        raise UsageError("checkpoint carries no vocabulary")
    corpus = data.load_corpus(args.test, args.labels, split="test")
    acc = evaluate(params, spec, data.encode(corpus, data.Vocabulary(tokens)), args.batch_size)
    print(f"{acc:.6f}")
    return 0


def _random_corpus(n, vocab, n_classes, rng, split):
    words = [f"w{i}" for i in range(vocab)]
    examples = [data.Example(tuple(rng.choice(words, size=int(rng.integers(5, 35)))),
                             int(rng.integers(0, n_classes))) for _ in range(n)]
    return data.Corpus(split, examples, [str(c) for c in range(n_classes)])


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.train is not None or args.dev is not None:
        corpora, vocab = _load_splits(args)
        n_classes = corpora["train"].n_classes
    else:
        n_classes = args.classes or 5
        n_train, n_dev = args.synthetic
        corpora = {"train": _random_corpus(n_train, 500, n_classes, rng, "train"),
                   "dev": _random_corpus(n_dev, 500, n_classes, rng, "dev")}
        vocab = data.Vocabulary.build(corpora.values())
    spec = spec_from_args(args, n_classes, len(vocab))
    train, dev = (data.encode(corpora[s], vocab) for s in ("train", "dev"))
    ch = bench.characterize(spec, train, dev, args.epochs, args.passes, args.trials,
                            args.batch_size, args.seed)
    table = f"{bench.HEADER}\n{ch.row()}\n"
    sys.stdout.write(table)
    sys.stderr.write(f"# training batches: {ch.train_batches}; inference batches: "
                     f"{ch.inference_batches_per_pass} per pass, {ch.inference_batches} total\n")
    if args.out:
        args.out.write_text(table, encoding="utf-8")
    return 0


def cmd_count_params(args) -> int:
    if args.arch == "bow" and args.vocab_size is None:
        raise UsageError("--vocab-size is required for bow")
    print(bench.count_parameters(spec_from_args(args)))
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for name, (err, ok) in gradcheck.run_suite(args.seed).items():
        print(f"{'PASS' if ok else 'FAIL'}\t{name}\t{err:.3e}")
        failed += not ok
    return 1 if failed else 0


def cmd_selftest(args) -> int:
    results = selftest.run()
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}\t{name}")
    return 0 if all(ok for _, ok in results) else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "count-params": cmd_count_params,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ssan: error: {exc}", file=sys.stderr)
        return 2
    except IO_ERRORS as exc:
        print(f"ssan: error: {exc}", file=sys.stderr)
        return 2
    except (SSANError, ValueError) as exc:
        print(f"ssan: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
