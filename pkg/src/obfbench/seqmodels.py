"""Toy transformer translator and causal LM built on :mod:`obfbench.gradkit`.

Both models are pre-LayerNorm transformers without linear biases. Every
forward function works on ``[T, d]`` or ``[B, T, d]`` activations, so the
same code serves batched training and single-sentence inference.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradkit as gk
from .gradkit import NonFiniteError, Tape, Tensor
from .textkit import BOS_ID, EOS_ID, PAD_ID, ParallelCorpus, TokenSeq, Vocabulary

log = logging.getLogger(__name__)

MAGIC = b"OBFB"
VERSION = 1
NEG_INF = -1e9


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not match the given vocabularies."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    d: int = 64
    layers: int = 2
    heads: int = 4
    ff: int = 128
    max_len: int = 64
    warmup_steps: int = 100
    clip_norm: float = 1.0
    heldout_fraction: float = 0.1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "d", "layers", "heads", "ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")


@dataclass
class TrainReport:
    history: list = field(default_factory=list)  # (epoch, train_loss, heldout_acc)
    heldout_acc: float = float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "heldout_acc"])
            for epoch, loss, acc in self.history:
                w.writerow([epoch, f"{loss:.6f}", f"{acc:.6f}"])


# --------------------------------------------------------------------------
# parameter containers
# --------------------------------------------------------------------------

def _layer_shapes(prefix, d, ff, cross):
    shapes = [(f"{prefix}.ln1.g", (d,)), (f"{prefix}.ln1.b", (d,))]
    shapes += [(f"{prefix}.self.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")]
    if cross:
        shapes += [(f"{prefix}.ln_x.g", (d,)), (f"{prefix}.ln_x.b", (d,))]
        shapes += [(f"{prefix}.cross.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")]
    shapes += [(f"{prefix}.ln2.g", (d,)), (f"{prefix}.ln2.b", (d,)),
               (f"{prefix}.ff.w1", (d, ff)), (f"{prefix}.ff.w2", (ff, d))]
    return shapes


def _init_params(shapes, rng, dtype=np.float32):
    params = {}
    for name, shape in shapes:
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith("embedding"):
            params[name] = (rng.standard_normal(shape) / math.sqrt(shape[1])).astype(dtype)
        elif name == "out":
            # near-uniform predictions at init
            params[name] = (0.02 * rng.standard_normal(shape) / math.sqrt(shape[0])).astype(dtype)
        else:
            params[name] = (rng.standard_normal(shape) / math.sqrt(shape[0])).astype(dtype)
    return params


class _Model:
    kind = ""

    def __init__(self, arch: dict, params: dict, vocabs: dict):
        self.arch = dict(arch)
        self.vocabs = vocabs
        self.params = {name: params[name] for name, _ in self.shapes()}
        d, h = self.arch["d"], self.arch["heads"]
        if d % h:
            raise ValueError("d must be divisible by heads")
        for name, shape in self.shapes():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def d(self) -> int:
        return self.arch["d"]

    @property
    def max_len(self) -> int:
        return self.arch["max_len"]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def shapes(self):
        raise NotImplementedError

    def tensors(self, tape: Tape | None = None) -> dict:
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def astype(self, dtype):
        return type(self)(self.arch, {k: v.astype(dtype) for k, v in self.params.items()}, self.vocabs)

    def copy(self):
        return self.astype(self.dtype)

    def positions(self, n: int) -> np.ndarray:
        if n > self.max_len:
            raise ValueError("exceeds max_len")
        return _sinusoid(self.max_len, self.d, self.dtype)[:n]


_SINUSOID_CACHE: dict = {}


def _sinusoid(n, d, dtype):
    key = (n, d, np.dtype(dtype).str)
    if key not in _SINUSOID_CACHE:
        pos = np.arange(n)[:, None]
        i = np.arange(d // 2)[None, :]
        angle = pos / np.power(10000.0, 2 * i / d)
        table = np.zeros((n, d))
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle)
        _SINUSOID_CACHE[key] = table.astype(dtype)
    return _SINUSOID_CACHE[key]


class Seq2SeqModel(_Model):
    """Encoder-decoder translator."""

    kind = "seq2seq"

    @classmethod
    def create(cls, src_vocab: Vocabulary, tgt_vocab: Vocabulary, d=64, layers=2, heads=4, ff=128,
               max_len=64, seed=0):
        arch = dict(d=d, layers=layers, heads=heads, ff=ff, max_len=max_len,
                    src_vocab_size=src_vocab.size, tgt_vocab_size=tgt_vocab.size)
        model = cls.__new__(cls)
        model.arch = arch
        rng = np.random.default_rng(seed)
        params = _init_params(model.shapes(), rng)
        return cls(arch, params, {"src": src_vocab, "tgt": tgt_vocab})

    @property
    def src_vocab(self) -> Vocabulary:
        return self.vocabs["src"]

    @property
    def tgt_vocab(self) -> Vocabulary:
        return self.vocabs["tgt"]

    @property
    def src_embedding(self) -> np.ndarray:
        return self.params["src_embedding"]

    def shapes(self):
        a = self.arch
        d, ff = a["d"], a["ff"]
        shapes = [("src_embedding", (a["src_vocab_size"], d)), ("tgt_embedding", (a["tgt_vocab_size"], d))]
        for i in range(a["layers"]):
            shapes += _layer_shapes(f"enc{i}", d, ff, cross=False)
        shapes += [("enc_ln.g", (d,)), ("enc_ln.b", (d,))]
        for i in range(a["layers"]):
            shapes += _layer_shapes(f"dec{i}", d, ff, cross=True)
        shapes += [("dec_ln.g", (d,)), ("dec_ln.b", (d,)), ("out", (d, a["tgt_vocab_size"]))]
        return shapes


class CausalLMModel(_Model):
    """Decoder-only language model used as a fluency scorer."""

    kind = "lm"

    @classmethod
    def create(cls, vocab: Vocabulary, d=64, layers=2, heads=4, ff=128, max_len=64, seed=0):
        arch = dict(d=d, layers=layers, heads=heads, ff=ff, max_len=max_len, vocab_size=vocab.size)
        model = cls.__new__(cls)
        model.arch = arch
        params = _init_params(model.shapes(), np.random.default_rng(seed))
        return cls(arch, params, {"src": vocab})

    @property
    def vocab(self) -> Vocabulary:
        return self.vocabs["src"]

    def shapes(self):
        a = self.arch
        d = a["d"]
        shapes = [("embedding", (a["vocab_size"], d))]
        for i in range(a["layers"]):
            shapes += _layer_shapes(f"dec{i}", d, a["ff"], cross=False)
        shapes += [("dec_ln.g", (d,)), ("dec_ln.b", (d,)), ("out", (d, a["vocab_size"]))]
        return shapes


# --------------------------------------------------------------------------
# transformer blocks
# --------------------------------------------------------------------------

def _attention(P, prefix, heads, hq, hkv, mask):
    d = hq.shape[-1]
    dh = d // heads
    q = gk.matmul(hq, P[prefix + ".wq"])
    k = gk.matmul(hkv, P[prefix + ".wk"])
    v = gk.matmul(hkv, P[prefix + ".wv"])
    inv = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        s = gk.scale(gk.matmul(gk.slice(q, lo, hi), gk.slice(k, lo, hi), transpose_b=True), inv)
        if mask is not None:
            s = gk.add(s, mask)
        outs.append(gk.matmul(gk.softmax(s), gk.slice(v, lo, hi)))
    cat = outs[0] if heads == 1 else gk.concat(outs, axis=-1)
    return gk.matmul(cat, P[prefix + ".wo"])


def _ln(P, prefix, x):
    return gk.layer_norm(x, P[prefix + ".g"], P[prefix + ".b"])


def _block(P, prefix, heads, x, self_mask, memory=None, cross_mask=None):
    h = _ln(P, prefix + ".ln1", x)
    x = gk.add(x, _attention(P, prefix + ".self", heads, h, h, self_mask))
    if memory is not None:
        h = _ln(P, prefix + ".ln_x", x)
        x = gk.add(x, _attention(P, prefix + ".cross", heads, h, memory, cross_mask))
    h = _ln(P, prefix + ".ln2", x)
    f = gk.matmul(gk.gelu(gk.matmul(h, P[prefix + ".ff.w1"])), P[prefix + ".ff.w2"])
    return gk.add(x, f)


def _key_mask(key_pad, n_query, dtype):
    """Additive mask [B, Tq, Tk] from a boolean key-padding array [B, Tk]."""
    if key_pad is None or not key_pad.any():
        return None
    m = np.where(key_pad, NEG_INF, 0.0).astype(dtype)[:, None, :]
    return np.broadcast_to(m, (key_pad.shape[0], n_query, key_pad.shape[1]))


def _causal_mask(lead_shape, n, dtype):
    # right padding only: pad keys are always in the future of real queries
    m = np.triu(np.full((n, n), NEG_INF, dtype=dtype), k=1)
    return np.broadcast_to(m, tuple(lead_shape) + (n, n))


def _add_positions(model, x: Tensor) -> Tensor:
    n = x.shape[-2]
    pos = np.broadcast_to(model.positions(n), x.shape)
    # unscaled embeddings: positions must stay visible for alignment
    return gk.add(x, Tensor(pos))


def encode(model: Seq2SeqModel, P, src_embeds: Tensor, src_pad=None) -> Tensor:
    heads = model.arch["heads"]
    x = _add_positions(model, src_embeds)
    mask = _key_mask(src_pad, x.shape[-2], model.dtype)
    for i in range(model.arch["layers"]):
        x = _block(P, f"enc{i}", heads, x, mask)
    return _ln(P, "enc_ln", x)


def decode_hidden(model: Seq2SeqModel, P, memory: Tensor, tgt_in: np.ndarray, src_pad=None) -> Tensor:
    heads = model.arch["heads"]
    tgt_in = np.asarray(tgt_in, dtype=np.int64)
    x = _add_positions(model, gk.embedding(P["tgt_embedding"], tgt_in))
    n = tgt_in.shape[-1]
    self_mask = _causal_mask(tgt_in.shape[:-1], n, model.dtype)
    cross_mask = _key_mask(src_pad, n, model.dtype)
    for i in range(model.arch["layers"]):
        x = _block(P, f"dec{i}", heads, x, self_mask, memory, cross_mask)
    return _ln(P, "dec_ln", x)


def lm_hidden(model: CausalLMModel, P, ids: np.ndarray) -> Tensor:
    heads = model.arch["heads"]
    ids = np.asarray(ids, dtype=np.int64)
    x = _add_positions(model, gk.embedding(P["embedding"], ids))
    mask = _causal_mask(ids.shape[:-1], ids.shape[-1], model.dtype)
    for i in range(model.arch["layers"]):
        x = _block(P, f"dec{i}", heads, x, mask)
    return _ln(P, "dec_ln", x)


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------

def emb(model: Seq2SeqModel, seq) -> Tensor:
    """Source-embedding rows for ``seq`` (no positional encoding)."""
    ids = np.asarray(tuple(seq), dtype=np.int64)
    if ids.shape[0] > model.max_len:
        raise ValueError("exceeds max_len")
    if ids.size and (ids.min() < 0 or ids.max() >= model.src_embedding.shape[0]):
        raise IndexError("id out of range")
    return Tensor(model.src_embedding[ids].reshape(ids.shape[0], model.d))


def _teacher_forcing(ref: Sequence[int]):
    ref = tuple(ref)
    return np.asarray((BOS_ID,) + ref, dtype=np.int64), np.asarray(ref + (EOS_ID,), dtype=np.int64)


def nmt_loss(model: Seq2SeqModel, src_embeds: Tensor, ref, params: dict | None = None) -> Tensor:
    """Teacher-forced mean cross-entropy of ``ref`` given pre-embedded source rows.

    ``src_embeds`` may be tracked on a tape; ``params`` defaults to the
    model's parameters as untracked constants.
    """
    ref = tuple(ref)
    if not ref:
        raise ValueError("reference must be non-empty")
    n = src_embeds.shape[-2]
    if n > model.max_len or len(ref) + 1 > model.max_len:
        raise ValueError("exceeds max_len")
    P = params if params is not None else model.tensors()
    tgt_in, tgt_out = _teacher_forcing(ref)
    memory = encode(model, P, src_embeds)
    logits = gk.matmul(decode_hidden(model, P, memory, tgt_in), P["out"])
    return gk.cross_entropy(logits, tgt_out, ignore_index=PAD_ID)


def translate_batch(model: Seq2SeqModel, sources: Sequence, max_steps: int | None = None) -> list[TokenSeq]:
    """Greedy decoding for a batch; argmax ties go to the lowest id."""
    sources = [tuple(s) for s in sources]
    if not sources:
        return []
    limit = model.max_len - 1 if max_steps is None else min(max_steps, model.max_len - 1)
    P = model.tensors()
    longest = max(len(s) for s in sources)
    if longest > model.max_len:
        raise ValueError("exceeds max_len")
    if longest == 0:
        # nothing to attend to; an empty source translates to an empty output
        return [TokenSeq(()) for _ in sources]
    batch = len(sources)
    src = np.full((batch, longest), PAD_ID, dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, :len(s)] = s
    pad = src == PAD_ID
    memory = encode(model, P, gk.embedding(P["src_embedding"], src), pad)
    out = np.full((batch, 1), BOS_ID, dtype=np.int64)
    done = np.array([len(s) == 0 for s in sources])
    lengths = np.zeros(batch, dtype=np.int64)
    for _ in range(limit):
        h = decode_hidden(model, P, memory, out, pad)
        last = gk.slice(h, h.shape[-2] - 1, h.shape[-2], axis=-2)
        logits = gk.matmul(last, P["out"]).data[:, 0, :]
        nxt = np.argmax(logits, axis=-1)
        nxt[done] = PAD_ID
        finished = (~done) & (nxt == EOS_ID)
        lengths[~done & ~finished] += 1
        done |= finished
        out = np.concatenate([out, nxt[:, None]], axis=1)
        if done.all():
            break
    return [TokenSeq(out[i, 1:1 + lengths[i]]) for i in range(batch)]


def translate(model: Seq2SeqModel, src) -> TokenSeq:
    """Greedy translation of one sentence, without BOS/EOS."""
    src = tuple(src)
    if len(src) > model.max_len:
        raise ValueError("exceeds max_len")
    if not src:
        return TokenSeq(())
    P = model.tensors()
    memory = encode(model, P, gk.embedding(P["src_embedding"], np.asarray(src, dtype=np.int64)))
    out = [BOS_ID]
    for _ in range(model.max_len - 1):
        h = decode_hidden(model, P, memory, np.asarray(out, dtype=np.int64))
        last = gk.slice(h, len(out) - 1, len(out), axis=-2)
        nxt = int(np.argmax(gk.matmul(last, P["out"]).data[0]))
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return TokenSeq(out[1:])


def lm_loss(model: CausalLMModel, seq, params: dict | None = None) -> float | Tensor:
    """Length-normalized negative log-likelihood of ``seq`` (BOS-prefixed).

    Returns a float for untracked parameters, a scalar Tensor otherwise.
    """
    seq = tuple(seq)
    if not seq:
        raise ValueError("empty sequence")
    if len(seq) > model.max_len:
        raise ValueError("sequence too long")
    P = params if params is not None else model.tensors()
    ids = np.asarray((BOS_ID,) + seq[:-1], dtype=np.int64)
    logits = gk.matmul(lm_hidden(model, P, ids), P["out"])
    loss = gk.cross_entropy(logits, np.asarray(seq, dtype=np.int64), ignore_index=None)
    return loss if params is not None else float(loss.data)


def lm_losses(model: CausalLMModel, seqs: Sequence) -> np.ndarray:
    """Per-sequence ``lm_loss`` computed one sequence at a time."""
    return np.array([lm_loss(model, s) for s in seqs])


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

class _Adam:
    def __init__(self, params: dict, lr: float, b1=0.9, b2=0.98, eps=1e-9):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def _lr_at(step: int, cfg: TrainConfig, total: int) -> float:
    warm = min(1.0, (step + 1) / max(1, cfg.warmup_steps))
    decay = 0.5 * (1.0 + math.cos(math.pi * min(1.0, step / max(1, total))))
    return cfg.learning_rate * warm * (0.1 + 0.9 * decay)


def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if not math.isfinite(norm):
        raise NonFiniteError("training diverged (non-finite gradient)")
    if max_norm and norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            g *= f
    return norm


def _pad(seqs, fill=PAD_ID):
    width = max(len(s) for s in seqs)
    arr = np.full((len(seqs), width), fill, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, :len(s)] = s
    return arr


def _batches(lengths, batch_size, rng):
    # bucket by length to cut padding; shuffle bucket order and members
    order = np.argsort(np.asarray(lengths) + rng.random(len(lengths)), kind="stable")
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def _check_lengths(pairs, cfg: TrainConfig):
    longest = max(max(len(s), len(t)) for s, t in pairs)
    if cfg.max_len < longest + 2:
        raise ValueError(f"max_len {cfg.max_len} < longest sentence {longest} + 2")


def token_accuracy(hyps, refs) -> float:
    """Position-wise matches over max(len(hyp), len(ref)), pooled."""
    hit = total = 0
    for h, r in zip(hyps, refs):
        h, r = tuple(h), tuple(r)
        hit += sum(a == b for a, b in zip(h, r))
        total += max(len(h), len(r))
    return hit / total if total else 1.0


def train_nmt(corpus: ParallelCorpus, cfg: TrainConfig, log_path=None):
    """Train a translator; returns ``(model, TrainReport)``."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    _check_lengths(corpus.pairs, cfg)
    train, held = corpus.split(cfg.heldout_fraction)
    if not train:
        train, held = list(corpus.pairs), []
    model = Seq2SeqModel.create(corpus.source_vocab, corpus.target_vocab, d=cfg.d, layers=cfg.layers,
                                heads=cfg.heads, ff=cfg.ff, max_len=cfg.max_len, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 11])
    opt = _Adam(model.params, cfg.learning_rate)
    total = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    report = TrainReport()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses, weights = [], []
        for idx in _batches([len(train[i][0]) for i in range(len(train))], cfg.batch_size, rng):
            src = _pad([train[i][0] for i in idx])
            tgt_in = _pad([(BOS_ID,) + train[i][1].ids for i in idx])
            tgt_out = _pad([train[i][1].ids + (EOS_ID,) for i in idx])
            tape = Tape()
            P = model.tensors(tape)
            pad = src == PAD_ID
            memory = encode(model, P, gk.embedding(P["src_embedding"], src), pad)
            logits = gk.matmul(decode_hidden(model, P, memory, tgt_in, pad), P["out"])
            loss = gk.cross_entropy(logits, tgt_out, ignore_index=PAD_ID)
            if not np.isfinite(loss.data):
                raise NonFiniteError("training diverged (loss is NaN)")
            g = tape.backward(loss)
            grads = {k: g[P[k]] for k in model.params}
            _clip(grads, cfg.clip_norm)
            opt.step(model.params, grads, _lr_at(step, cfg, total))
            step += 1
            losses.append(float(loss.data))
            weights.append(int((tgt_out != PAD_ID).sum()))
        train_loss = float(np.average(losses, weights=weights))
        acc = _heldout_accuracy(model, held) if held else float("nan")
        report.history.append((epoch, train_loss, acc))
        log.info("nmt epoch %d loss %.4f heldout_acc %.4f", epoch, train_loss, acc)
    report.heldout_acc = report.history[-1][2]
    if log_path is not None:
        report.write_csv(log_path)
    return model, report


def _heldout_accuracy(model, held, batch_size=256):
    hyps = []
    for i in range(0, len(held), batch_size):
        hyps += translate_batch(model, [s for s, _ in held[i:i + batch_size]])
    return token_accuracy(hyps, [t for _, t in held])


def train_lm(sentences: Sequence[TokenSeq], vocab: Vocabulary, cfg: TrainConfig, log_path=None):
    """Train a causal LM on source-side sentences; returns ``(model, TrainReport)``.

    The held-out metric is teacher-forced next-token greedy accuracy.
    """
    sentences = [tuple(s) for s in sentences if len(s)]
    if not sentences:
        raise ValueError("empty corpus")
    longest = max(len(s) for s in sentences)
    if cfg.max_len < longest + 2:
        raise ValueError(f"max_len {cfg.max_len} < longest sentence {longest} + 2")
    n_held = max(1, int(round(len(sentences) * cfg.heldout_fraction))) if len(sentences) > 1 else 0
    train, held = sentences[:len(sentences) - n_held], sentences[len(sentences) - n_held:]
    model = CausalLMModel.create(vocab, d=cfg.d, layers=cfg.layers, heads=cfg.heads, ff=cfg.ff,
                                 max_len=cfg.max_len, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 12])
    opt = _Adam(model.params, cfg.learning_rate)
    total = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    report = TrainReport()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses, weights = [], []
        for idx in _batches([len(train[i]) for i in range(len(train))], cfg.batch_size, rng):
            inp = _pad([(BOS_ID,) + train[i][:-1] for i in idx])
            tgt = _pad([train[i] for i in idx])
            tape = Tape()
            P = model.tensors(tape)
            logits = gk.matmul(lm_hidden(model, P, inp), P["out"])
            loss = gk.cross_entropy(logits, tgt, ignore_index=PAD_ID)
            if not np.isfinite(loss.data):
                raise NonFiniteError("training diverged (loss is NaN)")
            g = tape.backward(loss)
            grads = {k: g[P[k]] for k in model.params}
            _clip(grads, cfg.clip_norm)
            opt.step(model.params, grads, _lr_at(step, cfg, total))
            step += 1
            losses.append(float(loss.data))
            weights.append(int((tgt != PAD_ID).sum()))
        train_loss = float(np.average(losses, weights=weights))
        acc = _lm_accuracy(model, held) if held else float("nan")
        report.history.append((epoch, train_loss, acc))
        log.info("lm epoch %d loss %.4f heldout_acc %.4f", epoch, train_loss, acc)
    report.heldout_acc = report.history[-1][2]
    if log_path is not None:
        report.write_csv(log_path)
    return model, report


def _lm_accuracy(model, held, batch_size=256):
    hit = total = 0
    P = model.tensors()
    for i in range(0, len(held), batch_size):
        chunk = held[i:i + batch_size]
        inp = _pad([(BOS_ID,) + s[:-1] for s in chunk])
        tgt = _pad(chunk)
        pred = np.argmax(gk.matmul(lm_hidden(model, P, inp), P["out"]).data, axis=-1)
        mask = tgt != PAD_ID
        hit += int(((pred == tgt) & mask).sum())
        total += int(mask.sum())
    return hit / total if total else 1.0


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: _Model, path) -> None:
    """``OBFB`` | u32 version | u32 header length | JSON header | LE float32 params."""
    header = {
        "kind": model.kind,
        "arch": model.arch,
        "vocabs": {k: list(v.tokens) for k, v in model.vocabs.items()},
        "params": [[name, list(shape)] for name, shape in model.shapes()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for name, _ in model.shapes():
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def load_checkpoint(path, src_vocab: Vocabulary | None = None, tgt_vocab: Vocabulary | None = None):
    """Load a model; when vocabularies are given they must match the stored ones."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    vocabs = {k: Vocabulary(tuple(v)) for k, v in header["vocabs"].items()}
    for key, given in (("src", src_vocab), ("tgt", tgt_vocab)):
        if given is not None and key in vocabs and vocabs[key].tokens != given.tokens:
            raise CheckpointError(f"{path}: {key} vocabulary does not match the corpus")
    cls = {"seq2seq": Seq2SeqModel, "lm": CausalLMModel}.get(header["kind"])
    if cls is None:
        raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")
    shell = cls.__new__(cls)
    shell.arch = header["arch"]
    expected = [[n, list(s)] for n, s in shell.shapes()]
    if expected != header["params"]:
        raise CheckpointError(f"{path}: parameter layout does not match architecture")
    offset = 12 + hlen
    params = {}
    for name, shape in shell.shapes():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated")
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return cls(header["arch"], params, vocabs)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
