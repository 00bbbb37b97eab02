"""Command-line entry points: generate, train, eval, ablate, sweep,
export-attn.

Every run lands in an output directory holding the config snapshot,
metrics.csv, per-epoch checkpoints, and predictions.csv; aborted runs exit
nonzero after dumping the offending loss values.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import plots, synth
from . import tensor as T
from .experiments import ablate, export_attention, sweep
from .knowledge import Vocabulary, load_knowledge, save_triplets, tokenize
from .model import RetrieverReader, qi_input
from .reader import AnswerSpace
from .train import (TrainAbort, TrainConfig, evaluate, train,
                    write_predictions)
from .retriever import build_index, retrieve, write_trace


def save_dataset(data, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    synth.save_jsonl(data.train, out_dir / "train.jsonl")
    synth.save_jsonl(data.val, out_dir / "val.jsonl")
    save_triplets(data.triplets, out_dir / "kb.tsv")
    data.answers.save(out_dir / "answers.txt")
    data.vocab.save(out_dir / "vocab.txt")


def load_dataset(data_dir) -> synth.GeneratedData:
    data_dir = Path(data_dir)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    answers = AnswerSpace.load(data_dir / "answers.txt")
    kb = load_knowledge(data_dir / "kb.tsv", vocab)
    train_split = synth.load_jsonl(data_dir / "train.jsonl", answers)
    val_split = synth.load_jsonl(data_dir / "val.jsonl", answers)
    triplets = tuple((e.subject, e.relation, e.object) for e in kb.entries)
    return synth.GeneratedData(train=train_split, val=val_split, kb=kb,
                               answers=answers, world=None, vocab=vocab,
                               triplets=triplets)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    bools = {f.name for f in fields(TrainConfig)
             if f.type in ("bool", bool)}
    for f in fields(TrainConfig):
        flag = "--" + ("lambda" if f.name == "lam" else f.name).replace(
            "_", "-")
        if f.name in bools:
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            kind = {"int": int, "float": float, "str": str}.get(
                f.type if isinstance(f.type, str) else f.type.__name__, str)
            parser.add_argument(flag, dest=f.name, type=kind, default=None)
    parser.add_argument("--config", type=Path, default=None,
                        help="key=value file; explicit flags win")


def _build_config(args) -> TrainConfig:
    if args.config is not None:
        config = TrainConfig.load(args.config)
    else:
        config = TrainConfig()
    overrides = {}
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return replace(config, **overrides) if overrides else config


def _cmd_generate(args) -> int:
    data = synth.generate(seed=args.seed, n_train=args.n_train,
                          n_val=args.n_val, kb_size=args.kb_size,
                          needs_knowledge_frac=args.needs_knowledge_frac,
                          grid=args.grid, patch_dim=args.patch_dim,
                          noise_sigma=args.noise_sigma)
    save_dataset(data, args.out)
    print(f"wrote {len(data.train)} train / {len(data.val)} val instances, "
          f"{len(data.kb)} knowledge entries, {len(data.answers)} answers "
          f"to {args.out}")
    return 0


def _finish_run(config, model, data, run_dir, log) -> None:
    run_dir = Path(run_dir)
    index = None
    if config.use_explicit_knowledge and not config.random_retrieval:
        index = build_index(data.kb, model.knowledge_params)
    report = evaluate(model, data.val, data, config.t, index=index,
                      use_knowledge=config.use_explicit_knowledge,
                      random_retrieval=config.random_retrieval,
                      seed=config.seed)
    write_predictions(run_dir / "predictions.csv", report.rows)
    plots.loss_curves(log, run_dir / "loss_curves.png")
    plots.accuracy_curves(log, run_dir / "accuracy_curves.png")
    r1 = "-" if report.recall_at_1 is None else f"{report.recall_at_1:.4f}"
    rt = "-" if report.recall_at_t is None else f"{report.recall_at_t:.4f}"
    print(f"val accuracy {report.accuracy:.4f}  recall@1 {r1}  "
          f"recall@t {rt}")


def _cmd_train(args) -> int:
    config = _build_config(args)
    data = load_dataset(args.data)
    run_dir = Path(args.out)
    try:
        model, log = train(config, data, run_dir=run_dir,
                           verbose=not args.quiet)
    except TrainAbort as exc:
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "loss_dump.json", "w", encoding="utf-8") as fh:
            json.dump(exc.bundle.as_dict(), fh, indent=2)
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    _finish_run(config, model, data, run_dir, log)
    return 0


def _cmd_eval(args) -> int:
    data = load_dataset(args.data)
    model = RetrieverReader.load(args.model)
    config = _build_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = None
    if config.use_explicit_knowledge and not config.random_retrieval:
        index = build_index(data.kb, model.knowledge_params)
    report = evaluate(model, data.val, data, config.t, index=index,
                      use_knowledge=config.use_explicit_knowledge,
                      random_retrieval=config.random_retrieval,
                      seed=config.seed)
    write_predictions(out_dir / "predictions.csv", report.rows)
    if index is not None:
        trace = []
        for inst in data.val:
            qi = qi_input(tuple(tokenize(inst.question, data.vocab)),
                          inst.image)
            with T.no_grad():
                result = retrieve(qi, index, config.t, model.query_params)
            trace.append((inst.qid, result.entry_ids, result.scores))
        write_trace(out_dir / "trace.csv", trace)
    r1 = "-" if report.recall_at_1 is None else f"{report.recall_at_1:.4f}"
    rt = "-" if report.recall_at_t is None else f"{report.recall_at_t:.4f}"
    print(f"val accuracy {report.accuracy:.4f}  recall@1 {r1}  "
          f"recall@t {rt}")
    return 0


def _cmd_ablate(args) -> int:
    config = _build_config(args)
    data = load_dataset(args.data)
    rows = ablate(config, data, out_dir=args.out, verbose=not args.quiet)
    for name, acc, r1, rt in rows:
        r1s = "-" if r1 is None else f"{r1:.4f}"
        print(f"{name:18s} accuracy {acc:.4f}  recall@1 {r1s}")
    return 0


def _cmd_sweep(args) -> int:
    config = _build_config(args)
    data = load_dataset(args.data)
    rows = sweep(args.param, config, data, out_dir=args.out,
                 verbose=not args.quiet)
    for value, acc, r1 in rows:
        r1s = "-" if r1 is None else f"{r1:.4f}"
        print(f"{args.param}={value:<5} accuracy {acc:.4f}  recall@1 {r1s}")
    return 0


def _cmd_export_attn(args) -> int:
    data = load_dataset(args.data)
    model = RetrieverReader.load(args.model)
    qids = [int(x) for x in args.qids.split(",") if x.strip()]
    if not qids:
        raise SystemExit("no question ids given")
    written = export_attention(model, data, qids, args.out, t=args.t)
    print(f"wrote attention maps for {len(written)} questions to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kbvqa",
        description="retriever-reader VQA testbed on synthetic data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit a seeded synthetic dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--kb-size", type=int, default=500)
    p.add_argument("--needs-knowledge-frac", type=float, default=0.8)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--patch-dim", type=int, default=8)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the smoothing/knowledge ablations")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="sweep t or lambda")
    p.add_argument("--param", choices=("t", "lambda"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("export-attn", help="dump CLS patch attention maps")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--qids", type=str, required=True,
                   help="comma-separated validation question ids")
    p.add_argument("--t", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_export_attn)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
