"""``obfbench`` command line.

Typical pipeline (all artifacts land in the ``--out`` work directory)::

    obfbench --out work gen-corpus
    obfbench --out work train-nmt
    obfbench --out work train-lm
    obfbench --out work suite
    obfbench --out work sweep --kind target_length
    obfbench --out work report

Exit codes: 0 success, 1 usage/config error, 2 data/checkpoint error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .bench import Config, ConfigError, SweepSpec
from .gradkit import NonFiniteError
from .obfuscator import METHODS, AttackError
from .seqmodels import CheckpointError, load_checkpoint, save_checkpoint, train_lm, train_nmt
from .textkit import CorpusError, Vocabulary, load_corpus, tokenize

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _globals(parser, suppress=False):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=default, help="override the config seed")
    parser.add_argument("--out", default=default, help="work directory for all artifacts")
    parser.add_argument("--set", action="append", default=argparse.SUPPRESS if suppress else [],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obfbench", description="Single-token obfuscation attacks on toy translators.")
    _globals(p)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _globals(sp, suppress=True)
        return sp

    add("gen-corpus", "write a synthetic parallel corpus, vocabularies, suite sentences and targets")
    add("train-nmt", "train the translator")
    add("train-lm", "train the source-side language model")
    sp = add("attack", "attack a single (x, t) pair and print the result record")
    sp.add_argument("--x", required=True, help="source sentence (space separated tokens)")
    sp.add_argument("--t", required=True, help="target sentence to drop")
    sp.add_argument("--method", default="obfuscator", choices=sorted(METHODS))
    sp.add_argument("--trace", action="store_true")
    add("suite", "run every configured method over the suite")
    sp = add("sweep", "target-length or iteration-budget sweep")
    sp.add_argument("--kind", choices=["target_length", "iteration_budget"])
    sp.add_argument("--grid", help="comma separated grid, e.g. 2,4,6,8")
    sp = add("report", "re-aggregate and re-verify a results.jsonl")
    sp.add_argument("--results", help="results.jsonl (default: <results dir>/results.jsonl)")
    sp.add_argument("--no-verify", action="store_true", help="skip re-translation of stored inputs")
    return p


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key == "target":
            cfg.targets.append(raw.strip())
        elif key not in bench.CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        else:
            cfg.set(key, bench._convert(key, raw))
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("workdir", args.out)
    return cfg


def _vocabs(cfg: Config):
    return Vocabulary.load(cfg.path("src_vocab")), Vocabulary.load(cfg.path("tgt_vocab"))


def cmd_gen_corpus(cfg: Config, args) -> int:
    files = bench.generate_workspace(cfg)
    for key, path in files.items():
        if key in ("corpus", "src_vocab", "tgt_vocab", "sentences", "targets_file"):
            print(f"{key}: {path}")
    return EXIT_OK


def cmd_train(cfg: Config, args, lm: bool) -> int:
    src_vocab, tgt_vocab = _vocabs(cfg)
    corpus = load_corpus(cfg.path("corpus"), src_vocab, tgt_vocab)
    tcfg = cfg.train_config(lm=lm)
    Path(cfg["workdir"]).mkdir(parents=True, exist_ok=True)
    if lm:
        log_path = Path(cfg["workdir"]) / "lm_train.csv"
        model, report = train_lm(corpus.sources(), src_vocab, tcfg, log_path=log_path)
        save_checkpoint(model, cfg.path("lm"))
        print(f"lm: heldout next-token accuracy {report.heldout_acc:.4f} -> {cfg.path('lm')}")
    else:
        log_path = Path(cfg["workdir"]) / "nmt_train.csv"
        model, report = train_nmt(corpus, tcfg, log_path=log_path)
        save_checkpoint(model, cfg.path("nmt"))
        print(f"nmt: heldout token accuracy {report.heldout_acc:.4f} -> {cfg.path('nmt')}")
    return EXIT_OK


def cmd_attack(cfg: Config, args) -> int:
    src_vocab, tgt_vocab = _vocabs(cfg)
    nmt = load_checkpoint(cfg.path("nmt"), src_vocab, tgt_vocab)
    lm = load_checkpoint(cfg.path("lm"), src_vocab)
    x, t = tokenize(args.x, src_vocab), tokenize(args.t, src_vocab)
    acfg = cfg.attack_config()
    result = METHODS[args.method](x, t, nmt, lm, acfg, np.random.default_rng(acfg.seed))
    rec = bench.record(0, result, x, t, src_vocab, tgt_vocab, with_trace=args.trace)
    print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def _print_reports(reports):
    for m, rep in reports.items():
        tag = " (floor baseline)" if m == "random_control" else ""
        print(f"{m}{tag}: asr={rep.asr:.3f} mean_bleu={rep.mean_bleu:.4f} "
              f"mean_perplexity={rep.mean_perplexity:.4f} n={rep.total}")


def cmd_suite(cfg: Config, args) -> int:
    run = bench.run_suite(cfg.suite_config())
    _print_reports(run.reports)
    return EXIT_OK


def cmd_sweep(cfg: Config, args) -> int:
    kind = args.kind or cfg["sweep_kind"]
    if args.grid:
        cfg.set("grid", args.grid)
    base = cfg.suite_config(out_dir=Path(cfg["workdir"]) / f"sweep_{kind}")
    if kind == "target_length":
        base_file = Path(cfg["workdir"]) / "sweep_base_target.txt"
        if base_file.exists() and not cfg.targets:
            base = replace(base, targets=[base_file.read_text(encoding="utf-8").strip()])
    spec = SweepSpec(kind, cfg.grid(), base)
    if kind == "target_length":
        for length, asr, dist in bench.sweep_target_length(spec):
            print(f"length={length} asr={asr:.3f} mean_distance={dist:.3f}")
    else:
        for budget, asr in bench.sweep_iterations(spec):
            print(f"N={budget} asr={asr:.3f}")
    return EXIT_OK


def cmd_report(cfg: Config, args) -> int:
    src_vocab, tgt_vocab = _vocabs(cfg)
    path = Path(args.results) if args.results else cfg.path("results") / "results.jsonl"
    records = bench.load_records(path)
    acfg = cfg.attack_config()
    reports = bench.report_from_records(records, src_vocab, tgt_vocab, acfg.alpha, acfg.beta)
    _print_reports(reports)
    if not args.no_verify:
        nmt = load_checkpoint(cfg.path("nmt"), src_vocab, tgt_vocab)
        problems = bench.verify_records(records, nmt, src_vocab, tgt_vocab, acfg.alpha)
        for p in problems:
            print("verify:", p, file=sys.stderr)
        print(f"verified {len(records)} records, {len(problems)} problems")
        if problems:
            return EXIT_DATA
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-nmt": lambda c, a: cmd_train(c, a, lm=False),
    "train-lm": lambda c, a: cmd_train(c, a, lm=True),
    "attack": cmd_attack,
    "suite": cmd_suite,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, CheckpointError, AttackError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
