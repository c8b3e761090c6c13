import numpy as np
import pytest

from obfbench.seqmodels import CausalLMModel, TrainConfig, train_lm, train_nmt
from obfbench.textkit import SyntheticLangSpec, Vocabulary, gen_synthetic_corpus

from checks import tiny_seq2seq

SMALL = dict(d=32, layers=1, heads=2, ff=64, max_len=24, learning_rate=3e-3)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticLangSpec(vocab_size=16, min_len=3, max_len=8, seed=1, grammar="bigram", branching=3)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return gen_synthetic_corpus(small_spec, 600)


@pytest.fixture(scope="session")
def small_nmt(small_corpus):
    model, report = train_nmt(small_corpus, TrainConfig(epochs=20, **SMALL))
    return model, report


@pytest.fixture(scope="session")
def small_lm(small_corpus):
    model, report = train_lm(small_corpus.sources(), small_corpus.source_vocab, TrainConfig(epochs=10, **SMALL))
    return model, report


@pytest.fixture
def tiny_nmt():
    return tiny_seq2seq(seed=3)


@pytest.fixture
def tiny_lm(tiny_nmt):
    return CausalLMModel.create(tiny_nmt.src_vocab, d=16, layers=1, heads=2, ff=32, max_len=32, seed=4)


@pytest.fixture
def abc_vocab():
    return Vocabulary(["<pad>", "<s>", "</s>", "<unk>", "a", "b", "c"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdicts ------------------------------------------------------------

ACCEPTANCE = [f"A{i}" for i in range(1, 10)]
_verdicts: dict = {}


@pytest.fixture
def verdict():
    def record(name, ok, detail):
        _verdicts[name] = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, _verdicts[name]
    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance")
    for name in ACCEPTANCE:
        terminalreporter.write_line(_verdicts.get(name, f"{name} FAIL  not evaluated"))
