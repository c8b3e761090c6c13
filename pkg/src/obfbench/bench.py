"""Experiment harness: configs, attack suites, sweeps and result files."""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import aggregate, bleu, levenshtein
from .obfuscator import METHODS, AttackConfig, AttackResult
from .seqmodels import CheckpointError, TrainConfig, load_checkpoint, translate
from .textkit import (CorpusError, SyntheticLangSpec, TokenSeq, Vocabulary, detokenize, gen_clean_sentences,
                      tokenize)

log = logging.getLogger(__name__)

METHOD_ORDER = ("obfuscator", "suffix_dropper", "random_control")


class ConfigError(ValueError):
    """Bad or incomplete configuration (CLI exit code 1)."""


# --------------------------------------------------------------------------
# flat key = value config files
# --------------------------------------------------------------------------

# key -> (type, default); "target" may repeat
CONFIG_KEYS = {
    # file locations (relative paths resolve against workdir)
    "workdir": (str, "."),
    "corpus": (str, "corpus.tsv"),
    "src_vocab": (str, "src.vocab"),
    "tgt_vocab": (str, "tgt.vocab"),
    "sentences": (str, "suite.txt"),
    "targets_file": (str, "targets.txt"),
    "nmt": (str, "nmt.obfb"),
    "lm": (str, "lm.obfb"),
    "results": (str, "suite"),
    # synthetic language
    "vocab_size": (int, 64),
    "min_len": (int, 3),
    "max_len": (int, 20),
    "reorder_rule": (str, "swap_even_adjacent"),
    "grammar": (str, "bigram"),
    "branching": (int, 4),
    "aside_rate": (float, 0.15),
    "n_markers": (int, 2),
    "lang_seed": (int, 7),
    "n_pairs": (int, 2000),
    "n_sentences": (int, 50),
    "target_len": (int, 8),
    # training
    "epochs": (int, 30),
    "lm_epochs": (int, 20),
    "batch_size": (int, 16),
    "learning_rate": (float, 1e-3),
    "d": (int, 64),
    "layers": (int, 2),
    "heads": (int, 4),
    "ff": (int, 128),
    "model_max_len": (int, 64),
    # attack
    "target": (str, None),
    "methods": (str, "obfuscator,random_control"),
    "gamma": (float, 0.04),
    "N": (int, 100),
    "k": (int, 20),
    "alpha": (int, 5),
    "beta": (float, None),
    "optimizer": (str, "adam"),
    "seed": (int, 0),
    "exclude_special": (bool, True),
    "parallelism": (int, 1),
    "trace": (bool, False),
    # sweeps
    "sweep_kind": (str, "target_length"),
    "grid": (str, "2,4,6,8"),
}


def _convert(key, raw: str):
    typ, _ = CONFIG_KEYS[key]
    raw = raw.strip()
    if raw == "" or raw.lower() == "none":
        return None
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


class Config:
    """Parsed flat config with defaults; ``target`` collects repeated lines."""

    def __init__(self, values: dict | None = None, targets=None):
        self.values = {k: d for k, (_, d) in CONFIG_KEYS.items()}
        self.values.update(values or {})
        self.targets = list(targets or [])

    @classmethod
    def parse(cls, text: str) -> "Config":
        values, targets = {}, []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key == "target":
                targets.append(raw)
            else:
                values[key] = _convert(key, raw)
        return cls(values, targets)

    @classmethod
    def load(cls, path) -> "Config":
        try:
            return cls.parse(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, value):
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = value

    def path(self, key) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else Path(self.values["workdir"]) / p

    def synthetic_spec(self) -> SyntheticLangSpec:
        try:
            return SyntheticLangSpec(
                vocab_size=self["vocab_size"], min_len=self["min_len"], max_len=self["max_len"],
                reorder_rule=self["reorder_rule"], seed=self["lang_seed"], grammar=self["grammar"],
                branching=self["branching"], aside_rate=self["aside_rate"], n_markers=self["n_markers"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, lm: bool = False) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self["lm_epochs"] if lm else self["epochs"], batch_size=self["batch_size"],
                learning_rate=self["learning_rate"], seed=self["seed"] + (1 if lm else 0), d=self["d"],
                layers=self["layers"], heads=self["heads"], ff=self["ff"], max_len=self["model_max_len"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def attack_config(self) -> AttackConfig:
        try:
            return AttackConfig(gamma=self["gamma"], N=self["N"], k=self["k"], alpha=self["alpha"],
                                beta=self["beta"], optimizer=self["optimizer"], seed=self["seed"],
                                exclude_special=self["exclude_special"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grid(self) -> list[int]:
        try:
            return [int(v) for v in str(self["grid"]).split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad grid {self['grid']!r}") from exc

    def methods(self) -> list[str]:
        return [m.strip() for m in str(self["methods"]).split(",") if m.strip()]

    def suite_config(self, out_dir=None) -> "SuiteConfig":
        targets = list(self.targets)
        if not targets and self.path("targets_file").exists():
            targets = [ln.strip() for ln in self.path("targets_file").read_text(encoding="utf-8").splitlines()
                       if ln.strip() and not ln.startswith("#")]
        return SuiteConfig(
            nmt_path=str(self.path("nmt")), lm_path=str(self.path("lm")),
            src_vocab_path=str(self.path("src_vocab")), tgt_vocab_path=str(self.path("tgt_vocab")),
            sentences_path=str(self.path("sentences")), n_sentences=self["n_sentences"],
            targets=targets, attack=self.attack_config(), methods=self.methods(),
            out_dir=str(out_dir if out_dir is not None else self.path("results")),
            parallelism=self["parallelism"], write_trace=self["trace"])


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------

@dataclass
class SuiteConfig:
    nmt_path: str
    lm_path: str
    src_vocab_path: str
    tgt_vocab_path: str
    sentences_path: str
    targets: list
    attack: AttackConfig = field(default_factory=AttackConfig)
    methods: list = field(default_factory=lambda: ["obfuscator"])
    out_dir: str = "suite"
    parallelism: int = 1
    n_sentences: int | None = None
    write_trace: bool = False

    def validate(self):
        if not self.targets:
            raise ConfigError("at least one target sentence is required")
        if not self.methods:
            raise ConfigError("at least one method is required")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")


@dataclass
class SweepSpec:
    kind: str
    grid: list
    base: SuiteConfig

    def __post_init__(self):
        if self.kind not in ("target_length", "iteration_budget"):
            raise ConfigError(f"unknown sweep kind {self.kind!r}")
        if not self.grid:
            raise ConfigError("sweep grid must be non-empty")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ConfigError("sweep grid must be strictly increasing")


@dataclass
class SuiteRun:
    reports: dict           # method -> MetricReport
    results: dict           # method -> list[AttackResult] ordered by id
    examples: list          # (id, x TokenSeq, t TokenSeq)


def read_sentences(path, vocab: Vocabulary, limit=None) -> list[TokenSeq]:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    seqs = [tokenize(ln, vocab) for ln in lines if ln and not ln.startswith("#")]
    return seqs[:limit] if limit else seqs


def _load_models(cfg: SuiteConfig):
    src_vocab = Vocabulary.load(cfg.src_vocab_path)
    tgt_vocab = Vocabulary.load(cfg.tgt_vocab_path)
    nmt = load_checkpoint(cfg.nmt_path, src_vocab, tgt_vocab)
    lm = load_checkpoint(cfg.lm_path, src_vocab)
    if nmt.kind != "seq2seq" or lm.kind != "lm":
        raise CheckpointError("checkpoint kinds do not match (need a translator and an LM)")
    return src_vocab, tgt_vocab, nmt, lm


_WORKER: dict = {}


def _worker_init(cfg: SuiteConfig):
    _WORKER["models"] = _load_models(cfg)


def _run_shard(args):
    cfg, jobs = args
    _, _, nmt, lm = _WORKER["models"]
    return _run_jobs(cfg, jobs, nmt, lm)


def _run_jobs(cfg, jobs, nmt, lm):
    out = []
    for method, ex_id, x, t in jobs:
        rng = np.random.default_rng([cfg.attack.seed, ex_id])
        out.append((method, ex_id, METHODS[method](x, t, nmt, lm, cfg.attack, rng)))
    return out


def record(ex_id: int, result: AttackResult, x, t, src_vocab, tgt_vocab, with_trace=False) -> dict:
    ref = tuple(result.original_translation)
    rec = {
        "id": ex_id,
        "method": result.method,
        "x": detokenize(x, src_vocab),
        "t": detokenize(t, src_vocab),
        "omega": src_vocab.tokens[result.omega] if result.omega is not None else None,
        "success": bool(result.success),
        "iterations_used": int(result.iterations_used),
        "edit_distance": int(result.edit_distance),
        "bleu": bleu(result.adversarial_translation, ref) if ref else None,
        "lm_loss": _finite_or_none(result.lm_loss_value),
        "perplexity": _finite_or_none(math.exp(result.lm_loss_value)) if math.isfinite(result.lm_loss_value) else None,
        "adversarial_input": detokenize(result.adversarial_input, src_vocab),
        "best_attempt": [src_vocab.tokens[result.best_attempt[0]], result.best_attempt[1]],
        "translations": {
            "original": detokenize(result.original_translation, tgt_vocab),
            "adversarial": detokenize(result.adversarial_translation, tgt_vocab),
        },
        "config": result.config,
    }
    if with_trace:
        rec["trace"] = [
            {**step, "omega": src_vocab.tokens[step["omega"]]} for step in result.trace
        ]
    return rec


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


def run_suite(cfg: SuiteConfig) -> SuiteRun:
    """Run every (sentence, target, method) attack and write JSONL/CSV/JSON outputs.

    Output bytes do not depend on ``parallelism``: results are sorted by
    method and example id before anything is written.
    """
    cfg.validate()
    src_vocab, tgt_vocab, nmt, lm = _load_models(cfg)
    xs = read_sentences(cfg.sentences_path, src_vocab, cfg.n_sentences)
    if not xs:
        raise CorpusError("no suite sentences")
    ts = [tokenize(t, src_vocab) for t in cfg.targets]
    examples = [(ti * len(xs) + xi, x, t) for ti, t in enumerate(ts) for xi, x in enumerate(xs)]

    out_dir = Path(cfg.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir} is not writable: {exc}") from exc

    methods = [m for m in METHOD_ORDER if m in cfg.methods]
    jobs = [(m, ex_id, x, t) for m in methods for ex_id, x, t in examples]
    if cfg.parallelism == 1:
        raw = _run_jobs(cfg, jobs, nmt, lm)
    else:
        shards = [(cfg, [j for j in jobs if j[1] % cfg.parallelism == p]) for p in range(cfg.parallelism)]
        with ProcessPoolExecutor(cfg.parallelism, initializer=_worker_init, initargs=(cfg,)) as pool:
            raw = [item for part in pool.map(_run_shard, shards) for item in part]
    by_key = {(m, i): r for m, i, r in raw}
    ex_lookup = {ex_id: (x, t) for ex_id, x, t in examples}

    results, reports = {}, {}
    lines = []
    for m in methods:
        ids = [ex_id for ex_id, _, _ in examples]
        results[m] = [by_key[(m, i)] for i in ids]
        for i, r in zip(ids, results[m]):
            x, t = ex_lookup[i]
            lines.append(json.dumps(record(i, r, x, t, src_vocab, tgt_vocab, cfg.write_trace), sort_keys=True))
        rep = aggregate(results[m], cfg.attack.alpha, cfg.attack.beta, method=m, ids=ids,
                        omega_names=src_vocab.tokens)
        reports[m] = rep
        rep.write_csv(out_dir / f"summary_{m}.csv")
    (out_dir / "results.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_report(out_dir / "report.json", reports, cfg)
    _log_run(out_dir, f"suite finished: {len(examples)} examples x {len(methods)} methods")
    return SuiteRun(reports, results, examples)


def _write_report(path, reports: dict, cfg: SuiteConfig):
    payload = {
        "attack": cfg.attack.header(),
        "methods": {m: r.to_json() for m, r in reports.items()},
        "notes": {
            "random_control": "floor baseline, not an attack: one uniformly drawn token, no optimization",
            "bertscore": "not computed (reserved column)",
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _log_run(out_dir: Path, message: str):
    # wall-clock stamps live here, never in the data files
    import datetime

    with open(out_dir / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{datetime.datetime.now().isoformat(timespec='seconds')} {message}\n")


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

def sweep_target_length(spec: SweepSpec) -> list[tuple[int, float, float]]:
    """ASR of the obfuscator for nested prefixes of one base target."""
    if spec.kind != "target_length":
        raise ConfigError("sweep kind must be target_length")
    base = spec.base
    src_vocab = Vocabulary.load(base.src_vocab_path)
    full = tokenize(base.targets[0], src_vocab)
    if max(spec.grid) > len(full):
        raise ConfigError(f"grid value {max(spec.grid)} exceeds base target length {len(full)}")
    curve = []
    root = Path(base.out_dir)
    for length in spec.grid:
        prefix = detokenize(full[:length], src_vocab)
        run = run_suite(replace(base, targets=[prefix], methods=["obfuscator"],
                                out_dir=str(root / f"len_{length}")))
        rep = run.reports["obfuscator"]
        curve.append((length, rep.asr, float(np.mean([r.edit_distance for r in run.results["obfuscator"]]))))
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep_target_length.csv", "w", encoding="utf-8") as fh:
        fh.write("length,asr,mean_distance\n")
        for length, asr, dist in curve:
            fh.write(f"{length},{asr:.6f},{dist:.6f}\n")
    return curve


def asr_by_budget(results, grid) -> list[tuple[int, float]]:
    """ASR at each budget from a single run at the largest budget."""
    n = len(results)
    return [(b, sum(1 for r in results if r.success and r.iterations_used <= b) / n) for b in grid]


def sweep_iterations(spec: SweepSpec) -> list[tuple[int, float]]:
    """ASR as a function of the iteration budget, from one run at ``max(grid)``."""
    if spec.kind != "iteration_budget":
        raise ConfigError("sweep kind must be iteration_budget")
    base = spec.base
    top = max(spec.grid)
    root = Path(base.out_dir)
    run = run_suite(replace(base, attack=replace(base.attack, N=top), methods=["obfuscator"],
                            out_dir=str(root / f"budget_{top}")))
    curve = asr_by_budget(run.results["obfuscator"], spec.grid)
    values = [a for _, a in curve]
    assert all(b >= a for a, b in zip(values, values[1:])), "ASR must be non-decreasing in the budget"
    with open(root / "sweep_iterations.csv", "w", encoding="utf-8") as fh:
        fh.write("N,asr\n")
        for budget, asr in curve:
            fh.write(f"{budget},{asr:.6f}\n")
    return curve


# --------------------------------------------------------------------------
# re-reading results
# --------------------------------------------------------------------------

def load_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def result_from_record(rec: dict, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> AttackResult:
    omega = src_vocab.id(rec["omega"]) if rec["omega"] is not None else None
    lm_loss = rec["lm_loss"] if rec["lm_loss"] is not None else float("nan")
    return AttackResult(
        success=rec["success"], omega=omega, iterations_used=rec["iterations_used"],
        adversarial_input=tokenize(rec["adversarial_input"], src_vocab),
        original_translation=tokenize(rec["translations"]["original"], tgt_vocab),
        adversarial_translation=tokenize(rec["translations"]["adversarial"], tgt_vocab),
        edit_distance=rec["edit_distance"], lm_loss_value=lm_loss, method=rec["method"],
        config=rec.get("config", {}))


def verify_records(records, nmt, src_vocab, tgt_vocab, alpha: int) -> list[str]:
    """Re-translate every stored clean and adversarial input; returns a list of problems."""
    problems = []
    for rec in records:
        x_adv = tokenize(rec["adversarial_input"], src_vocab)
        again = detokenize(translate(nmt, x_adv), tgt_vocab)
        if again != rec["translations"]["adversarial"]:
            problems.append(f"{rec['method']}#{rec['id']}: adversarial translation not reproduced")
        original = detokenize(translate(nmt, tokenize(rec["x"], src_vocab)), tgt_vocab)
        if original != rec["translations"]["original"]:
            problems.append(f"{rec['method']}#{rec['id']}: original translation not reproduced")
        if rec["success"]:
            dist = levenshtein(tokenize(again, tgt_vocab), tokenize(rec["translations"]["original"], tgt_vocab))
            if dist > alpha:
                problems.append(f"{rec['method']}#{rec['id']}: success with distance {dist} > {alpha}")
    return problems


def report_from_records(records, src_vocab, tgt_vocab, alpha, beta=None) -> dict:
    by_method: dict = {}
    for rec in records:
        by_method.setdefault(rec["method"], []).append(rec)
    reports = {}
    for m, recs in by_method.items():
        recs = sorted(recs, key=lambda r: r["id"])
        results = [result_from_record(r, src_vocab, tgt_vocab) for r in recs]
        reports[m] = aggregate(results, alpha, beta, method=m, ids=[r["id"] for r in recs],
                               omega_names=src_vocab.tokens)
    return reports


def default_workdir_files(cfg: Config) -> dict:
    return {k: str(cfg.path(k)) for k in ("corpus", "src_vocab", "tgt_vocab", "sentences", "targets_file",
                                          "nmt", "lm", "results")}


def generate_workspace(cfg: Config) -> dict:
    """Write corpus, vocabularies, suite sentences and targets for a synthetic language."""
    from .textkit import SyntheticLanguage, gen_synthetic_corpus, write_corpus

    spec = cfg.synthetic_spec()
    workdir = Path(cfg["workdir"])
    workdir.mkdir(parents=True, exist_ok=True)
    corpus = gen_synthetic_corpus(spec, cfg["n_pairs"])
    write_corpus(corpus, cfg.path("corpus"))
    corpus.source_vocab.save(cfg.path("src_vocab"))
    corpus.target_vocab.save(cfg.path("tgt_vocab"))
    sents = gen_clean_sentences(spec, cfg["n_sentences"], stream=3)
    cfg.path("sentences").write_text(
        "".join(detokenize(s, corpus.source_vocab) + "\n" for s in sents), encoding="utf-8")
    base = gen_clean_sentences(spec, 1, stream=4, min_len=cfg["target_len"], max_len=cfg["target_len"])[0]
    mid = base[:max(1, (3 * cfg["target_len"]) // 4)]
    cfg.path("targets_file").write_text(
        "# mid-length target; the sweep base target is the full sentence below\n"
        + detokenize(mid, corpus.source_vocab) + "\n", encoding="utf-8")
    (workdir / "sweep_base_target.txt").write_text(detokenize(base, corpus.source_vocab) + "\n", encoding="utf-8")
    markers = SyntheticLanguage(spec).markers
    (workdir / "language.json").write_text(json.dumps({
        "spec": spec.__dict__, "markers": [corpus.source_vocab.tokens[i] for i in markers],
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return default_workdir_files(cfg)


def env_summary() -> dict:
    from . import _kernels

    return {"kernels": _kernels.BACKEND, "pid": os.getpid()}
