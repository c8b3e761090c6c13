"""Vocabularies, whitespace tokenization, synthetic parallel languages, corpus I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class CorpusError(ValueError):
    """Malformed corpus, vocabulary, or token data."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if tokens[:4] != SPECIALS:
            raise CorpusError("vocabulary must start with PAD, BOS, EOS, UNK")
        index = {tok: i for i, tok in enumerate(tokens)}
        if len(index) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def special_ids(self) -> tuple[int, int, int, int]:
        return (PAD_ID, BOS_ID, EOS_ID, UNK_ID)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def content_ids(self) -> np.ndarray:
        return np.arange(len(SPECIALS), self.size, dtype=np.int64)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return TokenSeq(self.ids[item])
        return self.ids[item]

    def __add__(self, other) -> "TokenSeq":
        return TokenSeq(self.ids + tuple(other))

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)

    def check(self, vocab: Vocabulary) -> "TokenSeq":
        for i in self.ids:
            if not 0 <= i < vocab.size:
                raise CorpusError("id out of range")
        return self


@dataclass(frozen=True)
class ParallelCorpus:
    pairs: tuple[tuple[TokenSeq, TokenSeq], ...]
    source_vocab: Vocabulary
    target_vocab: Vocabulary

    def __post_init__(self):
        for src, tgt in self.pairs:
            if len(src) == 0 or len(tgt) == 0:
                raise CorpusError("empty sentence in corpus")
            src.check(self.source_vocab)
            tgt.check(self.target_vocab)

    def __len__(self) -> int:
        return len(self.pairs)

    def sources(self) -> list[TokenSeq]:
        return [s for s, _ in self.pairs]

    def split(self, heldout_fraction: float = 0.1):
        """Deterministic train/held-out split: the tail is held out."""
        n_held = max(1, int(round(len(self.pairs) * heldout_fraction))) if len(self.pairs) > 1 else 0
        cut = len(self.pairs) - n_held
        return list(self.pairs[:cut]), list(self.pairs[cut:])


@dataclass(frozen=True)
class SyntheticLangSpec:
    """Parameters of a toy source language and its translation rule.

    ``grammar="uniform"`` draws every source token independently.
    ``grammar="bigram"`` walks a sparse Markov chain where each token has
    ``branching`` allowed successors, which gives a causal LM something to
    learn. ``aside_rate`` > 0 reserves ``n_markers`` tokens that introduce an
    untranslated trailing clause in that fraction of the pairs (the target
    side keeps only the main sentence), mimicking noisy parallel data.
    """

    vocab_size: int = 64
    min_len: int = 3
    max_len: int = 20
    reorder_rule: str = "none"
    seed: int = 0
    grammar: str = "uniform"
    branching: int = 4
    aside_rate: float = 0.0
    n_markers: int = 2

    def __post_init__(self):
        if not 0 < self.min_len <= self.max_len:
            raise ValueError("need 0 < min_len <= max_len")
        if self.vocab_size < 8:
            raise ValueError("vocab_size must be >= 8")
        if self.reorder_rule not in ("none", "swap_even_adjacent"):
            raise ValueError(f"unknown reorder_rule {self.reorder_rule!r}")
        if self.grammar not in ("uniform", "bigram"):
            raise ValueError(f"unknown grammar {self.grammar!r}")
        if not 0.0 <= self.aside_rate < 1.0:
            raise ValueError("aside_rate must be in [0, 1)")
        if self.aside_rate > 0 and not 1 <= self.n_markers < self.vocab_size // 2:
            raise ValueError("n_markers out of range")
        if not 1 <= self.branching <= self.vocab_size:
            raise ValueError("branching out of range")


def build_vocab(corpus_lines: Iterable[str]) -> Vocabulary:
    lines = list(corpus_lines)
    if not lines:
        raise CorpusError("empty corpus")
    seen = dict.fromkeys(SPECIALS)
    for line in lines:
        for tok in line.split():
            seen.setdefault(tok)
    return Vocabulary(tuple(seen))


def tokenize(text: str, vocab: Vocabulary) -> TokenSeq:
    return TokenSeq(vocab.id(tok) for tok in text.split())


def detokenize(seq, vocab: Vocabulary) -> str:
    words = []
    for i in seq:
        if not 0 <= i < vocab.size:
            raise CorpusError("id out of range")
        if i >= len(SPECIALS):
            words.append(vocab.tokens[i])
    return " ".join(words)


def reorder(ids: Sequence[int], rule: str) -> list[int]:
    out = list(ids)
    if rule == "swap_even_adjacent":
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
    elif rule != "none":
        raise ValueError(f"unknown reorder_rule {rule!r}")
    return out


class SyntheticLanguage:
    """Deterministic generator behind :func:`gen_synthetic_corpus`."""

    def __init__(self, spec: SyntheticLangSpec):
        self.spec = spec
        words = [f"a{i}" for i in range(spec.vocab_size)]
        self.source_vocab = Vocabulary(SPECIALS + tuple(words))
        # target ids are a seeded permutation of the uppercase-tagged words,
        # so the token map is a bijection that is not the identity on ids
        rng = np.random.default_rng([spec.seed, 1])
        perm = rng.permutation(spec.vocab_size)
        self.target_vocab = Vocabulary(SPECIALS + tuple(words[i].upper() for i in perm))
        self.token_map = np.zeros(self.source_vocab.size, dtype=np.int64)
        self.token_map[:4] = np.arange(4)
        for w in words:
            self.token_map[self.source_vocab.id(w)] = self.target_vocab.id(w.upper())

        content = self.source_vocab.content_ids()
        if spec.aside_rate > 0:
            self.markers = np.sort(rng.choice(content, size=spec.n_markers, replace=False))
        else:
            self.markers = np.zeros(0, dtype=np.int64)
        self.plain = np.setdiff1d(content, self.markers)
        self.successors = {
            int(t): np.sort(rng.choice(self.plain, size=min(spec.branching, len(self.plain)), replace=False))
            for t in self.plain
        }

    def sentence(self, rng, length: int) -> list[int]:
        if self.spec.grammar == "uniform":
            return [int(t) for t in rng.choice(self.plain, size=length)]
        out = [int(rng.choice(self.plain))]
        while len(out) < length:
            out.append(int(rng.choice(self.successors[out[-1]])))
        return out

    def random_length(self, rng) -> int:
        return int(rng.integers(self.spec.min_len, self.spec.max_len + 1))

    def translate(self, src: Sequence[int]) -> list[int]:
        return reorder(self.token_map[np.asarray(src, dtype=np.int64)].tolist(), self.spec.reorder_rule)

    def pair(self, rng):
        main = self.sentence(rng, self.random_length(rng))
        tgt = self.translate(main)
        src = main
        if self.spec.aside_rate > 0 and rng.random() < self.spec.aside_rate:
            marker = int(rng.choice(self.markers))
            src = main + [marker] + self.sentence(rng, self.random_length(rng))
        return TokenSeq(src), TokenSeq(tgt)


def gen_synthetic_corpus(spec: SyntheticLangSpec, n_pairs: int) -> ParallelCorpus:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    lang = SyntheticLanguage(spec)
    rng = np.random.default_rng([spec.seed, 2])
    pairs = tuple(lang.pair(rng) for _ in range(n_pairs))
    return ParallelCorpus(pairs, lang.source_vocab, lang.target_vocab)


def gen_clean_sentences(spec: SyntheticLangSpec, n: int, stream: int = 3,
                        min_len: int | None = None, max_len: int | None = None) -> list[TokenSeq]:
    """Marker-free source sentences from the same language (for attack suites)."""
    lang = SyntheticLanguage(spec)
    rng = np.random.default_rng([spec.seed, stream])
    lo = spec.min_len if min_len is None else min_len
    hi = spec.max_len if max_len is None else max_len
    return [TokenSeq(lang.sentence(rng, int(rng.integers(lo, hi + 1)))) for _ in range(n)]


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def write_corpus(corpus: ParallelCorpus, path) -> None:
    lines = [
        detokenize(src, corpus.source_vocab) + "\t" + detokenize(tgt, corpus.target_vocab)
        for src, tgt in corpus.pairs
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus_lines(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 2:
            raise CorpusError(f"{path}:{lineno}: expected exactly one TAB")
        pairs.append((parts[0], parts[1]))
    return pairs


def load_corpus(path, source_vocab: Vocabulary | None = None,
                target_vocab: Vocabulary | None = None) -> ParallelCorpus:
    raw = read_corpus_lines(path)
    if not raw:
        raise CorpusError("empty corpus")
    sv = source_vocab or build_vocab(s for s, _ in raw)
    tv = target_vocab or build_vocab(t for _, t in raw)
    pairs = tuple((tokenize(s, sv), tokenize(t, tv)) for s, t in raw)
    return ParallelCorpus(pairs, sv, tv)
