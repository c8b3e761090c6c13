"""The numba kernels and their numpy twins must agree exactly."""
import os
import subprocess
import sys

import numpy as np
import pytest

from obfbench import _kernels

from oracles import levenshtein_oracle, topk_cosine_oracle

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed or disabled")


def test_numpy_levenshtein_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = rng.integers(0, 4, size=int(rng.integers(0, 10)))
        b = rng.integers(0, 4, size=int(rng.integers(0, 10)))
        assert _kernels.levenshtein_numpy(a, b) == levenshtein_oracle(a.tolist(), b.tolist())


def test_numpy_topk_matches_oracle_with_ties():
    rng = np.random.default_rng(1)
    table = rng.standard_normal((64, 6)).astype(np.float32)
    table[10:20] = table[0]
    table[30] = 0.0
    excluded = np.zeros(64, dtype=bool)
    excluded[:3] = True
    for _ in range(30):
        q = table[0] if rng.random() < 0.3 else rng.standard_normal(6).astype(np.float32)
        got = _kernels.topk_numpy(_kernels.cosine_scores_numpy(table, q), 12, excluded).tolist()
        assert got == topk_cosine_oracle(q, table, 12, excluded={0, 1, 2})


def test_numpy_cosine_zero_rows_and_query():
    table = np.array([[1.0, 0.0], [0.0, 0.0]])
    s = _kernels.cosine_scores_numpy(table, np.array([2.0, 0.0]))
    assert s[0] == 1.0 and s[1] == -np.inf
    assert np.all(_kernels.cosine_scores_numpy(table, np.zeros(2)) == -np.inf)


@needs_numba
def test_levenshtein_backends_agree():
    rng = np.random.default_rng(2)
    for _ in range(500):
        a = rng.integers(0, 6, size=int(rng.integers(0, 30)))
        b = rng.integers(0, 6, size=int(rng.integers(0, 30)))
        assert _kernels.levenshtein_numba(a, b) == _kernels.levenshtein_numpy(a, b)


@needs_numba
def test_cosine_backends_agree():
    rng = np.random.default_rng(3)
    table = rng.standard_normal((200, 16)).astype(np.float32)
    table[5] = 0.0
    for _ in range(20):
        q = rng.standard_normal(16).astype(np.float32)
        np.testing.assert_allclose(_kernels.cosine_scores_numba(table, q),
                                   _kernels.cosine_scores_numpy(table, q), rtol=1e-12, atol=1e-15)


@needs_numba
def test_topk_backends_agree_exactly():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(1, 80))
        scores = rng.integers(-5, 5, size=n).astype(np.float64)  # many exact ties
        scores[rng.random(n) < 0.1] = -np.inf
        excluded = rng.random(n) < 0.2
        k = int(rng.integers(1, n + 1))
        a = _kernels.topk_numba(scores, k, excluded)
        b = _kernels.topk_numpy(scores, k, excluded)
        assert a.tolist() == b.tolist()


@needs_numba
def test_scatter_add_backends_agree():
    rng = np.random.default_rng(5)
    ids = rng.integers(0, 10, size=40)
    rows = rng.standard_normal((40, 7))
    a = _kernels.scatter_add_rows_numba(np.zeros((10, 7)), ids, rows)
    b = _kernels.scatter_add_rows_numpy(np.zeros((10, 7)), ids, rows)
    np.testing.assert_allclose(a, b, rtol=1e-13)


def test_dispatch_handles_batched_ids():
    out = np.zeros((5, 3), dtype=np.float32)
    ids = np.array([[1, 1], [4, 0]])
    rows = np.ones((2, 2, 3), dtype=np.float32)
    _kernels.scatter_add_rows(out, ids, rows)
    np.testing.assert_array_equal(out[:, 0], [1, 2, 0, 0, 1])


def test_env_flag_forces_numpy_backend():
    env = dict(os.environ, OBFBENCH_NO_NUMBA="1")
    code = ("from obfbench import _kernels as k; from obfbench.metrics import levenshtein; "
            "print(k.BACKEND, k.HAVE_NUMBA, levenshtein([1, 2, 3], [1, 3]))")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "False", "1"]
