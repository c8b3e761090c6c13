"""Edit distance, smoothed sentence BLEU, perplexity and ASR aggregation."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .seqmodels import CausalLMModel, lm_loss

BLEU_SMOOTHING = "epsilon: zero n-gram matches replaced by 0.1/total"
CSV_COLUMNS = ["id", "method", "success", "edit_distance", "bleu", "perplexity", "bertscore", "omega"]


class AggregationError(ValueError):
    """Stored success flags disagree with the recomputed ones."""


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Unit-cost token edit distance."""
    return _kernels.levenshtein(np.asarray(tuple(a), dtype=np.int64), np.asarray(tuple(b), dtype=np.int64))


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(hyp: Sequence[int], ref: Sequence[int], max_order: int = 4, epsilon: float = 0.1) -> float:
    """Sentence BLEU with epsilon smoothing and the usual brevity penalty."""
    hyp, ref = tuple(hyp), tuple(ref)
    if not ref:
        raise ValueError("reference must be non-empty")
    if not hyp:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_order + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matches = sum(min(c, r[g]) for g, c in h.items())
        total = max(1, len(hyp) - n + 1)
        p = matches / total if matches else epsilon / total
        log_sum += math.log(p)
    bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))
    return bp * math.exp(log_sum / max_order)


def perplexity(seq, lm: CausalLMModel) -> float:
    return math.exp(lm_loss(lm, seq))


def _mean(values):
    return float(np.mean(values)) if len(values) else float("nan")


@dataclass
class ExampleRow:
    id: int
    success: bool
    edit_distance: int
    bleu: float
    perplexity: float
    omega: str | None


@dataclass
class MetricReport:
    method: str
    asr: float
    mean_bleu: float
    mean_perplexity: float
    per_example: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.per_example)

    def csv_rows(self):
        rows = []
        for ex in self.per_example:
            rows.append([ex.id, self.method, int(ex.success), ex.edit_distance, _fmt(ex.bleu),
                         _fmt(ex.perplexity), "", ex.omega or ""])
        rows.append(["summary", self.method, _fmt(self.asr), "", _fmt(self.mean_bleu),
                     _fmt(self.mean_perplexity), "", ""])
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            w.writerows(self.csv_rows())

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "asr": self.asr,
            "mean_bleu": _nan_to_none(self.mean_bleu),
            "mean_perplexity": _nan_to_none(self.mean_perplexity),
            "bertscore": None,
            "bleu_smoothing": BLEU_SMOOTHING,
            "n": self.total,
            "per_example": [
                {"id": ex.id, "success": ex.success, "edit_distance": ex.edit_distance,
                 "bleu": ex.bleu, "perplexity": ex.perplexity, "omega": ex.omega}
                for ex in self.per_example
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def aggregate(results, alpha: int, beta: float | None = None, method: str = "", ids=None,
              omega_names=None) -> MetricReport:
    """Recompute success from the stored translations and summarize.

    BLEU and perplexity means are taken over successful examples (NaN when
    there are none); ASR is over all examples.
    """
    results = list(results)
    if not results:
        raise AggregationError("no results to aggregate")
    ids = list(range(len(results))) if ids is None else list(ids)
    rows = []
    for rid, r in zip(ids, results):
        dist = levenshtein(r.adversarial_translation, r.original_translation)
        ok = dist <= alpha and (beta is None or r.lm_loss_value <= beta)
        if ok != r.success:
            raise AggregationError(f"example {rid}: stored success={r.success} but recomputed {ok}")
        ref = tuple(r.original_translation)
        b = bleu(r.adversarial_translation, ref) if ref else float("nan")
        name = None
        if r.omega is not None:
            name = omega_names[r.omega] if omega_names is not None else str(r.omega)
        rows.append(ExampleRow(rid, ok, dist, b, math.exp(r.lm_loss_value), name))
    wins = [x for x in rows if x.success]
    return MetricReport(
        method=method,
        asr=len(wins) / len(rows),
        mean_bleu=_mean([x.bleu for x in wins]),
        mean_perplexity=_mean([x.perplexity for x in wins]),
        per_example=rows,
    )
