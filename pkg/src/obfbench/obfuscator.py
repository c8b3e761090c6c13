"""Single-token obfuscator search and the Suffix-Dropper baseline.

Both attacks look for one token ``w`` such that translating ``x w t`` gives
(almost) the same output as translating ``x`` alone, i.e. the model drops
the target sentence ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from . import gradkit as gk
from .gradkit import NonFiniteError, Tape, Tensor
from .metrics import levenshtein
from .seqmodels import CausalLMModel, Seq2SeqModel, lm_loss, nmt_loss, translate
from .textkit import SPECIALS, TokenSeq, Vocabulary


@dataclass(frozen=True)
class AttackConfig:
    gamma: float = 0.04
    N: int = 100
    k: int = 20
    alpha: int = 5
    beta: float | None = None
    optimizer: str = "adam"
    seed: int = 0
    exclude_special: bool = True

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def header(self) -> dict:
        return {"gamma": self.gamma, "N": self.N, "k": self.k, "alpha": self.alpha,
                "beta": self.beta, "optimizer": self.optimizer, "seed": self.seed}


@dataclass
class AttackResult:
    success: bool
    omega: int | None
    iterations_used: int
    adversarial_input: TokenSeq
    original_translation: TokenSeq
    adversarial_translation: TokenSeq
    edit_distance: int
    lm_loss_value: float
    best_attempt: tuple | None = None  # (token id, distance)
    trace: list = field(default_factory=list)
    method: str = "obfuscator"
    config: dict = field(default_factory=dict)


class AttackError(ValueError):
    """Invalid attack inputs (lengths, vocabularies, empty pools)."""


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def candidate_mask(vocab_size: int, exclude_special: bool = True, extra=()) -> np.ndarray:
    """Boolean array, True for ids that may never be chosen."""
    excluded = np.zeros(vocab_size, dtype=bool)
    if exclude_special:
        excluded[:min(len(SPECIALS), vocab_size)] = True
    for i in extra:
        excluded[int(i)] = True
    return excluded


def init_omega(vocab, rng: np.random.Generator, exclude_special: bool = True) -> int:
    """Uniform random starting token."""
    size = vocab.size if isinstance(vocab, Vocabulary) else int(vocab)
    pool = np.flatnonzero(~candidate_mask(size, exclude_special))
    if pool.size == 0:
        raise AttackError("empty candidate pool")
    return int(pool[rng.integers(pool.size)])


class AdamState:
    def __init__(self, dim: int):
        self.m = np.zeros(dim, dtype=np.float64)
        self.v = np.zeros(dim, dtype=np.float64)
        self.t = 0


def grad_step(e_omega: np.ndarray, grad: np.ndarray, state: AdamState | None, cfg: AttackConfig) -> np.ndarray:
    """One descent step on the continuous obfuscator embedding."""
    e = np.asarray(e_omega)
    g = np.asarray(grad)
    if e.shape != g.shape:
        raise ValueError("shape mismatch between embedding and gradient")
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite gradient")
    if cfg.optimizer == "sgd":
        return e - cfg.gamma * g
    b1, b2, eps = 0.9, 0.999, 1e-8
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * (g.astype(np.float64) ** 2)
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    return (e - cfg.gamma * m_hat / (np.sqrt(v_hat) + eps)).astype(e.dtype)


def knn_project(e_omega: np.ndarray, table: np.ndarray, k: int, exclusions=None) -> np.ndarray:
    """The ``k`` ids whose rows have the highest cosine similarity to ``e_omega``.

    Ties go to the lower id; zero rows and excluded ids are never returned.
    """
    table = np.asarray(table)
    if exclusions is None:
        excluded = np.zeros(table.shape[0], dtype=bool)
    else:
        excluded = np.asarray(exclusions)
        if excluded.dtype != bool:
            excluded = candidate_mask(table.shape[0], False, excluded)
    if k < 1 or k > int((~excluded).sum()):
        raise AttackError("k must be between 1 and the candidate count")
    if not np.any(e_omega):
        raise AttackError("zero query vector")
    scores = _kernels.cosine_scores(table, np.asarray(e_omega))
    out = _kernels.topk(scores, k, excluded)
    if out.size == 0:
        raise AttackError("all candidate rows are zero")
    return out


def lm_select(W: Sequence[int], x, t, lm: CausalLMModel, cache: dict | None = None):
    """Candidate in ``W`` whose insertion gives the lowest LM loss (ties: lowest id)."""
    W = sorted(int(w) for w in W)
    if not W:
        raise AttackError("empty candidate set")
    x, t = tuple(x), tuple(t)
    if len(x) + 1 + len(t) > lm.max_len:
        raise AttackError("sequence too long")
    best, best_loss = None, math.inf
    for w in W:
        if cache is not None and w in cache:
            loss = cache[w]
        else:
            loss = lm_loss(lm, x + (w,) + t)
            if cache is not None:
                cache[w] = loss
        if loss < best_loss:
            best, best_loss = w, loss
    return best, best_loss


def adversarial_loss_and_grad(nmt: Seq2SeqModel, x, e_omega: np.ndarray, t, y, params=None):
    """Teacher-forced loss of ``y`` given ``x || e_omega || t`` and its gradient wrt ``e_omega``."""
    P = params if params is not None else nmt.tensors()
    table = nmt.src_embedding
    tape = Tape()
    leaf = tape.leaf(np.asarray(e_omega, dtype=table.dtype).reshape(1, -1))
    parts = []
    if len(x):
        parts.append(Tensor(table[np.asarray(tuple(x), dtype=np.int64)]))
    parts.append(leaf)
    if len(t):
        parts.append(Tensor(table[np.asarray(tuple(t), dtype=np.int64)]))
    loss = nmt_loss(nmt, gk.concat(parts, axis=0), y, params=P)
    grads = tape.backward(loss)
    return float(loss.data), grads[leaf][0]


def _check_inputs(x, t, nmt, lm):
    if len(x) == 0 or len(t) == 0:
        raise AttackError("x and t must be non-empty")
    n = len(x) + 1 + len(t)
    if n > nmt.max_len:
        raise AttackError("sequence too long")
    if lm is not None:
        if n > lm.max_len:
            raise AttackError("sequence too long")
        if lm.vocab.tokens != nmt.src_vocab.tokens:
            raise AttackError("LM vocabulary differs from the translator's source vocabulary")


class _Evaluator:
    """Per-attack memo of translations and LM losses keyed by the inserted token."""

    def __init__(self, x, t, nmt, lm):
        self.x, self.t, self.nmt, self.lm = tuple(x), tuple(t), nmt, lm
        self.y = translate(nmt, self.x)
        self.translations: dict = {}
        self.lm_cache: dict = {}

    def adv_input(self, w) -> TokenSeq:
        return TokenSeq(self.x + (int(w),) + self.t)

    def translation(self, w) -> TokenSeq:
        if w not in self.translations:
            self.translations[w] = translate(self.nmt, self.adv_input(w))
        return self.translations[w]

    def distance(self, w) -> int:
        return levenshtein(self.translation(w), self.y)

    def lm_loss(self, w) -> float:
        if self.lm is None:
            return float("nan")
        if w not in self.lm_cache:
            self.lm_cache[w] = lm_loss(self.lm, self.adv_input(w))
        return self.lm_cache[w]

    def passes(self, dist, loss, cfg) -> bool:
        return dist <= cfg.alpha and (cfg.beta is None or loss <= cfg.beta)

    def result(self, method, cfg, success, w, iterations, best, trace) -> AttackResult:
        chosen = w if success else best[0]
        return AttackResult(
            success=success,
            omega=int(w) if success else None,
            iterations_used=iterations,
            adversarial_input=self.adv_input(chosen),
            original_translation=TokenSeq(self.y),
            adversarial_translation=self.translation(chosen),
            edit_distance=self.distance(chosen),
            lm_loss_value=self.lm_loss(chosen),
            best_attempt=(int(best[0]), int(best[1])),
            trace=trace,
            method=method,
            config=cfg.header(),
        )


def _better(best, w, dist):
    return best is None or dist < best[1]


# --------------------------------------------------------------------------
# attacks
# --------------------------------------------------------------------------

def attack(x, t, nmt: Seq2SeqModel, lm: CausalLMModel, cfg: AttackConfig = AttackConfig(),
           rng: np.random.Generator | None = None) -> AttackResult:
    """Gradient projection search with LM-guided candidate selection.

    Each iteration: (1) step the continuous obfuscator embedding against the
    gradient of the adversarial loss, (2) take its ``k`` cosine nearest
    vocabulary rows, (3) keep the one the LM finds most fluent in context,
    then stop as soon as the translation is within ``alpha`` edits of the
    original translation.
    """
    x, t = tuple(x), tuple(t)
    _check_inputs(x, t, nmt, lm)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ev = _Evaluator(x, t, nmt, lm)
    y = ev.y
    if len(y) + 1 > nmt.max_len:
        raise AttackError("sequence too long")
    table = nmt.src_embedding
    excluded = candidate_mask(table.shape[0], cfg.exclude_special)
    # k may exceed the pool once specials are excluded; then every candidate is scored
    k = min(cfg.k, int((~excluded).sum()))
    P = nmt.tensors()

    w0 = init_omega(table.shape[0], rng, cfg.exclude_special)
    e = table[w0].copy()
    state = AdamState(e.shape[0])
    best, trace = None, []
    for itr in range(1, cfg.N + 1):
        adv_loss, g = adversarial_loss_and_grad(nmt, x, e, t, y, params=P)
        e = grad_step(e, g, state, cfg)
        W = knn_project(e, table, k, excluded)
        w, lml = lm_select(W, x, t, lm, cache=ev.lm_cache)
        dist = ev.distance(w)
        trace.append({"iteration": itr, "omega": w, "adv_loss": adv_loss, "lm_loss": lml, "distance": dist})
        if _better(best, w, dist):
            best = (w, dist)
        if ev.passes(dist, lml, cfg):
            return ev.result("obfuscator", cfg, True, w, itr, best, trace)
    return ev.result("obfuscator", cfg, False, None, cfg.N, best, trace)


def suffix_dropper(x, t, nmt: Seq2SeqModel, cfg: AttackConfig = AttackConfig(), lm: CausalLMModel | None = None,
                   rng: np.random.Generator | None = None) -> AttackResult:
    """First-order token replacement without any fluency term.

    Each step swaps the current token for the vocabulary row minimizing
    ``emb(w) . grad``; it stops early when the swap would keep the same token.
    ``lm`` is only used to report the final LM loss.
    """
    x, t = tuple(x), tuple(t)
    _check_inputs(x, t, nmt, lm)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ev = _Evaluator(x, t, nmt, lm)
    y = ev.y
    table = nmt.src_embedding
    excluded = candidate_mask(table.shape[0], cfg.exclude_special)
    P = nmt.tensors()

    w = init_omega(table.shape[0], rng, cfg.exclude_special)
    best, trace = None, []
    for itr in range(1, cfg.N + 1):
        adv_loss, g = adversarial_loss_and_grad(nmt, x, table[w], t, y, params=P)
        scores = table.astype(np.float64) @ g.astype(np.float64)
        scores[excluded] = np.inf
        cand = int(np.argmin(scores))
        if cand == w:
            # a fixed point; only the initial token has not been checked yet
            dist = ev.distance(w)
            lml = ev.lm_loss(w)
            trace.append({"iteration": itr, "omega": w, "adv_loss": adv_loss,
                          "lm_loss": None if math.isnan(lml) else lml, "distance": dist, "stagnated": True})
            if _better(best, w, dist):
                best = (w, dist)
            ok = ev.passes(dist, lml, cfg)
            return ev.result("suffix_dropper", cfg, ok, w if ok else None, itr, best, trace)
        w = cand
        dist = ev.distance(w)
        lml = ev.lm_loss(w)
        trace.append({"iteration": itr, "omega": w, "adv_loss": adv_loss,
                      "lm_loss": None if math.isnan(lml) else lml, "distance": dist})
        if _better(best, w, dist):
            best = (w, dist)
        if ev.passes(dist, lml, cfg):
            return ev.result("suffix_dropper", cfg, True, w, itr, best, trace)
    return ev.result("suffix_dropper", cfg, False, None, cfg.N, best, trace)


def random_control(x, t, nmt: Seq2SeqModel, lm: CausalLMModel | None = None, cfg: AttackConfig = AttackConfig(),
                   rng: np.random.Generator | None = None) -> AttackResult:
    """Floor baseline: one uniformly drawn token, no optimization."""
    x, t = tuple(x), tuple(t)
    _check_inputs(x, t, nmt, lm)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    ev = _Evaluator(x, t, nmt, lm)
    w = init_omega(nmt.src_embedding.shape[0], rng, cfg.exclude_special)
    dist = ev.distance(w)
    lml = ev.lm_loss(w)
    trace = [{"iteration": 1, "omega": w, "adv_loss": None,
              "lm_loss": None if math.isnan(lml) else lml, "distance": dist}]
    ok = ev.passes(dist, lml, cfg)
    return ev.result("random_control", cfg, ok, w, 1, (w, dist), trace)


METHODS = {
    "obfuscator": lambda x, t, nmt, lm, cfg, rng: attack(x, t, nmt, lm, cfg, rng=rng),
    "suffix_dropper": lambda x, t, nmt, lm, cfg, rng: suffix_dropper(x, t, nmt, cfg, lm=lm, rng=rng),
    "random_control": lambda x, t, nmt, lm, cfg, rng: random_control(x, t, nmt, lm, cfg, rng=rng),
}
