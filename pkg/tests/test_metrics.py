import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obfbench.metrics import (BLEU_SMOOTHING, CSV_COLUMNS, AggregationError, aggregate, bleu, levenshtein,
                              perplexity)
from obfbench.obfuscator import AttackResult
from obfbench.seqmodels import CausalLMModel, lm_loss
from obfbench.textkit import TokenSeq, Vocabulary, gen_clean_sentences

from checks import levenshtein_mismatches
from oracles import bleu_oracle, levenshtein_oracle

seqs = st.lists(st.integers(0, 4), max_size=10)


def test_levenshtein_identity_and_classic():
    assert levenshtein([1, 2, 3], [1, 2, 3]) == 0
    kitten = [ord(c) for c in "kitten"]
    sitting = [ord(c) for c in "sitting"]
    assert levenshtein(kitten, sitting) == 3 == levenshtein_oracle(kitten, sitting)


def test_levenshtein_edges():
    assert levenshtein([], []) == 0
    assert levenshtein([], [1, 2]) == 2
    assert levenshtein([1, 2, 3], []) == 3
    assert levenshtein(TokenSeq([1, 2]), (2, 1)) == 2


def test_levenshtein_matches_recursive_oracle():
    assert levenshtein_mismatches(levenshtein, n_pairs=500) == []


@settings(max_examples=200, deadline=None)
@given(seqs, seqs, seqs)
def test_levenshtein_is_a_metric(a, b, c):
    assert levenshtein(a, a) == 0
    assert levenshtein(a, b) == levenshtein(b, a)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert (levenshtein(a, b) == 0) == (a == b)


def test_bleu_perfect_and_empty():
    assert bleu([4, 5, 6, 7], [4, 5, 6, 7]) == 1.0
    assert bleu([], [4, 5]) == 0.0
    with pytest.raises(ValueError):
        bleu([4], [])


def test_bleu_hand_computed():
    # precisions 3/4, 2/3, 1/2 and a zero 4-gram count smoothed to 0.1/1; no brevity penalty
    expected = (0.75 * (2 / 3) * 0.5 * 0.1) ** 0.25
    assert bleu([1, 2, 3, 4], [1, 2, 3, 5]) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.3976, abs=1e-4)


def test_bleu_brevity_penalty():
    hyp, ref = [1, 2, 3, 4], [1, 2, 3, 4, 5, 6, 7, 8]
    assert bleu(hyp, ref) == pytest.approx(bleu_oracle(hyp, ref), rel=1e-12)
    assert bleu(hyp, ref) < bleu(hyp, hyp)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 5), max_size=12), st.lists(st.integers(0, 5), min_size=1, max_size=12))
def test_bleu_oracle_and_range(hyp, ref):
    b = bleu(hyp, ref)
    assert 0.0 <= b <= 1.0
    assert b == pytest.approx(bleu_oracle(hyp, ref), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=4, max_size=12), st.permutations(list(range(6))))
def test_bleu_relabel_invariance_and_self(s, perm):
    assert bleu(s, s) == 1.0
    hyp = s[:-1] + [s[0]]
    relabel = lambda xs: [perm[x] for x in xs]
    assert bleu(relabel(hyp), relabel(s)) == bleu(hyp, s)


def test_perplexity_is_exp_lm_loss_bitwise(tiny_lm):
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = rng.integers(4, 12, size=int(rng.integers(1, 12))).tolist()
        assert perplexity(s, tiny_lm) == math.exp(lm_loss(tiny_lm, s))


def test_perplexity_uniform_lm():
    v = Vocabulary(["<pad>", "<s>", "</s>", "<unk>"] + [f"a{i}" for i in range(12)])
    lm = CausalLMModel.create(v, d=32, layers=1, heads=2, ff=64, seed=1)
    assert abs(perplexity([4, 5, 6, 7, 8, 9], lm) - 16.0) < 0.5


def test_perplexity_empty(tiny_lm):
    with pytest.raises(ValueError):
        perplexity([], tiny_lm)


def test_trained_lm_prefers_real_sentences_over_shuffled(small_lm, small_spec):
    lm, _ = small_lm
    rng = np.random.default_rng(0)
    sents = gen_clean_sentences(small_spec, 100, stream=12, min_len=6, max_len=8)
    wins = 0
    for s in sents:
        shuffled = list(s)
        while shuffled == list(s):
            rng.shuffle(shuffled)
        wins += perplexity(s, lm) < perplexity(shuffled, lm)
    assert wins >= 80


def _result(adv, orig, success, lm=1.0, omega=5):
    return AttackResult(success=success, omega=omega if success else None, iterations_used=1,
                        adversarial_input=TokenSeq([4, omega, 6]), original_translation=TokenSeq(orig),
                        adversarial_translation=TokenSeq(adv), edit_distance=levenshtein(adv, orig),
                        lm_loss_value=lm, best_attempt=(omega, levenshtein(adv, orig)))


def test_aggregate_counts():
    rs = [_result([4, 5], [4, 5], True), _result([4, 5, 6, 7, 8, 9, 10], [4], False),
          _result([4], [4, 5], True, lm=2.0), _result([9, 9, 9, 9, 9, 9], [4], False)]
    rep = aggregate(rs, alpha=1, method="obfuscator")
    assert rep.asr == 0.5 and rep.total == 4
    assert rep.mean_perplexity == pytest.approx((math.e + math.e ** 2) / 2)
    assert rep.mean_bleu == pytest.approx((bleu([4, 5], [4, 5]) + bleu([4], [4, 5])) / 2)


def test_aggregate_all_success():
    rs = [_result([4, 5], [4, 5], True), _result([4, 6], [4, 5], True)]
    rep = aggregate(rs, alpha=1)
    assert rep.asr == 1.0
    assert all(ex.edit_distance <= 1 for ex in rep.per_example)


def test_aggregate_no_success_gives_nan_means():
    rep = aggregate([_result([9, 9, 9], [4], False)], alpha=0)
    assert rep.asr == 0.0 and math.isnan(rep.mean_bleu) and math.isnan(rep.mean_perplexity)


def test_aggregate_rejects_mismatch_and_empty():
    with pytest.raises(AggregationError):
        aggregate([_result([4, 5], [4, 5], False)], alpha=5)
    with pytest.raises(AggregationError):
        aggregate([], alpha=5)


def test_aggregate_respects_beta():
    ok = _result([4, 5], [4, 5], True, lm=1.0)
    rejected = _result([4, 5], [4, 5], False, lm=3.0)
    assert aggregate([ok, rejected], alpha=5, beta=2.0).asr == 0.5
    with pytest.raises(AggregationError):
        aggregate([ok, rejected], alpha=5)


def test_report_serialization(tmp_path):
    names = [f"t{i}" for i in range(10)]
    rs = [_result([4, 5], [4, 5], True), _result([9, 9, 9], [4], False)]
    rep = aggregate(rs, alpha=1, method="obfuscator", ids=[10, 11], omega_names=names)
    rep.write_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == CSV_COLUMNS
    assert [r[0] for r in rows[1:]] == ["10", "11", "summary"]
    assert rows[1][-1] == "t5" and rows[2][-1] == ""
    assert rows[1][CSV_COLUMNS.index("bertscore")] == ""
    rep.write_json(tmp_path / "s.json")
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["asr"] == 0.5 and data["bertscore"] is None and data["bleu_smoothing"] == BLEU_SMOOTHING
    assert len(data["per_example"]) == 2
