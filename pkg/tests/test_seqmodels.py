import csv
import math

import numpy as np
import pytest

from obfbench.gradkit import Tape, Tensor
from obfbench.seqmodels import (CausalLMModel, CheckpointError, Seq2SeqModel, TrainConfig, emb, lm_loss, lm_losses,
                                load_checkpoint, nmt_loss, save_checkpoint, token_accuracy, train_lm, train_nmt,
                                translate, translate_batch)
from obfbench.textkit import (ParallelCorpus, SyntheticLanguage, TokenSeq, Vocabulary, gen_clean_sentences,
                              gen_synthetic_corpus)

from checks import tiny_seq2seq
from oracles import central_difference, rel_error


def _vocab16():
    return Vocabulary(["<pad>", "<s>", "</s>", "<unk>"] + [f"a{i}" for i in range(12)])


def test_emb_rows(tiny_nmt):
    table = tiny_nmt.src_embedding
    np.testing.assert_array_equal(emb(tiny_nmt, [5]).data, table[[5]])
    assert emb(tiny_nmt, []).shape == (0, tiny_nmt.d)
    ids = np.random.default_rng(0).integers(0, table.shape[0], size=9)
    np.testing.assert_array_equal(emb(tiny_nmt, ids).data, np.stack([table[i] for i in ids]))


def test_emb_too_long(tiny_nmt):
    with pytest.raises(ValueError, match="exceeds max_len"):
        emb(tiny_nmt, [4] * (tiny_nmt.max_len + 1))


def test_untrained_nmt_loss_near_uniform():
    v = _vocab16()
    model = Seq2SeqModel.create(v, v, d=32, layers=1, heads=2, ff=64, seed=0)
    loss = float(nmt_loss(model, emb(model, [4, 5, 6, 7]), [8, 9, 10]).data)
    assert abs(loss - math.log(16)) < 0.5


def test_nmt_loss_errors(tiny_nmt):
    with pytest.raises(ValueError):
        nmt_loss(tiny_nmt, emb(tiny_nmt, [4, 5]), [])
    with pytest.raises(ValueError):
        nmt_loss(tiny_nmt, emb(tiny_nmt, [4, 5]), [4] * tiny_nmt.max_len)


def test_nmt_loss_gradient_any_source_row():
    model = tiny_seq2seq(seed=8)
    m64 = model.astype(np.float64)
    src, ref = [4, 9, 6, 5], [7, 8, 10]
    P64 = m64.tensors()
    for row in range(len(src)):
        base = m64.src_embedding[src].copy()

        def f(v, row=row):
            x = base.copy()
            x[row] = v
            return float(nmt_loss(m64, Tensor(x), ref, params=P64).data)

        tape = Tape()
        leaf = tape.leaf(model.src_embedding[src].copy())
        g = tape.backward(nmt_loss(model, leaf, ref))[leaf]
        assert rel_error(g[row], central_difference(f, base[row], h=1e-3)) < 1e-3


def test_translate_empty_and_deterministic(tiny_nmt):
    assert translate(tiny_nmt, []).ids == ()
    a = translate(tiny_nmt, [4, 5, 6])
    assert a == translate(tiny_nmt, [4, 5, 6])
    assert len(a) <= tiny_nmt.max_len - 1


def test_translate_batch_matches_single(small_nmt, small_spec):
    model, _ = small_nmt
    sents = gen_clean_sentences(small_spec, 12, stream=5)
    assert translate_batch(model, sents) == [translate(model, s) for s in sents]


def test_translate_too_long(tiny_nmt):
    with pytest.raises(ValueError, match="exceeds max_len"):
        translate(tiny_nmt, [4] * (tiny_nmt.max_len + 1))


def test_trained_model_follows_the_rule(small_nmt, small_spec):
    model, report = small_nmt
    assert report.heldout_acc >= 0.9
    lang = SyntheticLanguage(small_spec)
    sents = gen_clean_sentences(small_spec, 40, stream=6)
    exact = [list(translate(model, s)) == lang.translate(list(s)) for s in sents]
    assert sum(exact) / len(exact) >= 0.8
    abc = gen_clean_sentences(small_spec, 1, stream=7, min_len=3, max_len=3)[0]
    assert list(translate(model, abc)) == lang.translate(list(abc))


def test_trained_loss_below_uniform(small_nmt, small_corpus):
    model, _ = small_nmt
    _, held = small_corpus.split(0.1)
    below = 0
    for src, _ in held:
        y = translate(model, src)
        if not len(y):
            continue
        loss = float(nmt_loss(model, emb(model, src), y).data)
        assert math.isfinite(loss)
        below += loss < math.log(model.tgt_vocab.size)
    assert below / len(held) >= 0.9


def test_trained_in_distribution_loss_small(small_nmt, small_corpus):
    model, _ = small_nmt
    src, tgt = small_corpus.pairs[0]
    assert float(nmt_loss(model, emb(model, src), tgt).data) < 0.1


def test_train_report_csv(small_nmt, tmp_path):
    _, report = small_nmt
    path = tmp_path / "log.csv"
    report.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["epoch", "train_loss", "heldout_acc"]
    assert len(rows) == 21
    losses = [float(r[1]) for r in rows[1:]]
    assert losses[-1] < losses[0]


def test_one_pair_memorization():
    v = _vocab16()
    pair = (TokenSeq([4, 5, 6]), TokenSeq([7, 8, 9]))
    corpus = ParallelCorpus((pair,), v, v)
    cfg = TrainConfig(epochs=300, batch_size=1, learning_rate=3e-3, d=32, layers=1, heads=2, ff=64,
                      max_len=16, warmup_steps=10)
    model, report = train_nmt(corpus, cfg)
    assert report.history[-1][1] < 0.01
    assert list(translate(model, pair[0])) == [7, 8, 9]


def test_training_is_bit_deterministic(tmp_path, small_spec):
    corpus = gen_synthetic_corpus(small_spec, 60)
    cfg = TrainConfig(epochs=2, d=16, layers=1, heads=2, ff=32, max_len=24)
    for name in ("a", "b"):
        model, _ = train_nmt(corpus, cfg)
        save_checkpoint(model, tmp_path / f"{name}.obfb")
    assert (tmp_path / "a.obfb").read_bytes() == (tmp_path / "b.obfb").read_bytes()


def test_train_errors(small_spec):
    v = _vocab16()
    with pytest.raises(ValueError, match="empty corpus"):
        train_nmt(ParallelCorpus((), v, v), TrainConfig(epochs=1))
    corpus = gen_synthetic_corpus(small_spec, 10)
    with pytest.raises(ValueError):
        train_nmt(corpus, TrainConfig(epochs=1, max_len=8, d=16, heads=2))
    with pytest.raises(ValueError, match="empty corpus"):
        train_lm([], v, TrainConfig(epochs=1))


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(d=30, heads=4)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


def test_divergence_raises(small_spec):
    from obfbench.gradkit import NonFiniteError

    corpus = gen_synthetic_corpus(small_spec, 40)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError):
        train_nmt(corpus, TrainConfig(epochs=3, learning_rate=1e30, warmup_steps=1, clip_norm=1e300,
                                      d=16, layers=1, heads=2, ff=32, max_len=24))


def test_untrained_lm_near_uniform():
    lm = CausalLMModel.create(_vocab16(), d=32, layers=1, heads=2, ff=64, seed=0)
    assert abs(lm_loss(lm, [4, 5, 6, 7, 8]) - math.log(16)) < 0.1


def test_lm_loss_errors(tiny_lm):
    with pytest.raises(ValueError, match="empty sequence"):
        lm_loss(tiny_lm, [])
    with pytest.raises(ValueError, match="sequence too long"):
        lm_loss(tiny_lm, [4] * (tiny_lm.max_len + 1))


def test_lm_losses_matches_single(tiny_lm):
    seqs = [[4, 5], [6, 7, 8, 9], [10]]
    np.testing.assert_array_equal(lm_losses(tiny_lm, seqs), [lm_loss(tiny_lm, s) for s in seqs])


def test_trained_lm_beats_untrained(small_lm, small_spec):
    lm, _ = small_lm
    fresh = CausalLMModel.create(lm.vocab, d=32, layers=1, heads=2, ff=64, max_len=24, seed=99)
    sents = gen_clean_sentences(small_spec, 100, stream=8)
    assert np.mean([lm_loss(lm, s) for s in sents]) < np.mean([lm_loss(fresh, s) for s in sents])


def test_token_accuracy():
    assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert token_accuracy([[1, 2]], [[1, 2, 3, 4]]) == 0.5
    assert token_accuracy([[1, 9, 3]], [[1, 2, 3]]) == pytest.approx(2 / 3)


def test_checkpoint_round_trip(tmp_path, small_nmt, small_lm, small_spec):
    model, _ = small_nmt
    lm, _ = small_lm
    save_checkpoint(model, tmp_path / "nmt.obfb")
    save_checkpoint(lm, tmp_path / "lm.obfb")
    again = load_checkpoint(tmp_path / "nmt.obfb", model.src_vocab, model.tgt_vocab)
    lm2 = load_checkpoint(tmp_path / "lm.obfb", lm.vocab)
    probe = gen_clean_sentences(small_spec, 8, stream=9)
    assert translate_batch(again, probe) == translate_batch(model, probe)
    for s in probe:
        assert lm_loss(lm2, s) == lm_loss(lm, s)
        a = nmt_loss(again, emb(again, s), [4, 5]).data
        b = nmt_loss(model, emb(model, s), [4, 5]).data
        assert a.tobytes() == b.tobytes()
    raw = (tmp_path / "nmt.obfb").read_bytes()
    assert raw[:4] == b"OBFB" and int.from_bytes(raw[4:8], "little") == 1


def test_checkpoint_errors(tmp_path, tiny_nmt):
    path = tmp_path / "m.obfb"
    save_checkpoint(tiny_nmt, path)
    other = Vocabulary(["<pad>", "<s>", "</s>", "<unk>", "x"])
    with pytest.raises(CheckpointError, match="vocabulary"):
        load_checkpoint(path, src_vocab=other)
    raw = path.read_bytes()
    (tmp_path / "bad.obfb").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.obfb")
    (tmp_path / "short.obfb").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.obfb")
    (tmp_path / "long.obfb").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long.obfb")


def test_positions_limit(tiny_nmt):
    assert tiny_nmt.positions(3).shape == (3, tiny_nmt.d)
    with pytest.raises(ValueError, match="exceeds max_len"):
        tiny_nmt.positions(tiny_nmt.max_len + 1)


def test_batched_and_single_encoder_agree(tiny_nmt):
    # padding must not leak into real positions
    a = [4, 5, 6]
    b = [7, 8, 9, 10, 11]
    assert translate_batch(tiny_nmt, [a, b]) == [translate(tiny_nmt, a), translate(tiny_nmt, b)]
