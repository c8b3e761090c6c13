"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature. Set
``OBFBENCH_NO_NUMBA=1`` before import to force the numpy path (useful for
debugging and for the benchmark in ``benchmarks/bench_kernels.py``).
"""
import os

import numpy as np

_DISABLED = os.environ.get("OBFBENCH_NO_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference paths
# --------------------------------------------------------------------------

def levenshtein_numpy(a, b):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n, m = a.shape[0], b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    cols = np.arange(m + 1, dtype=np.int64)
    prev = cols.copy()
    for i in range(1, n + 1):
        # deletions and substitutions are vectorized; insertions are a
        # running minimum along the row: cur[j] = min_k<=j (cand[k] + j - k)
        cand = np.empty(m + 1, dtype=np.int64)
        cand[0] = i
        cand[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (a[i - 1] != b))
        prev = np.minimum.accumulate(cand - cols) + cols
    return int(prev[m])


def cosine_scores_numpy(table, query):
    table = np.asarray(table, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    qn = np.sqrt(np.dot(query, query))
    norms = np.sqrt(np.einsum("ij,ij->i", table, table))
    out = np.full(table.shape[0], -np.inf)
    if qn == 0.0:
        return out
    ok = norms > 0.0
    out[ok] = (table[ok] @ query) / (norms[ok] * qn)
    return out


def topk_numpy(scores, k, excluded):
    """Indices of the k largest scores, ties broken by lower index."""
    scores = np.asarray(scores, dtype=np.float64).copy()
    scores[np.asarray(excluded, dtype=bool)] = np.nan
    valid = np.flatnonzero(~np.isnan(scores) & (scores > -np.inf))
    order = valid[np.argsort(-scores[valid], kind="stable")]
    return order[:k].astype(np.int64)


def scatter_add_rows_numpy(out, ids, rows):
    np.add.at(out, ids, rows)
    return out


# --------------------------------------------------------------------------
# numba paths
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def levenshtein_numba(a, b):
        n = a.shape[0]
        m = b.shape[0]
        if n == 0:
            return m
        if m == 0:
            return n
        prev = np.arange(m + 1)
        cur = np.empty(m + 1, dtype=np.int64)
        for i in range(1, n + 1):
            cur[0] = i
            ai = a[i - 1]
            for j in range(1, m + 1):
                best = prev[j - 1] + (0 if ai == b[j - 1] else 1)
                if prev[j] + 1 < best:
                    best = prev[j] + 1
                if cur[j - 1] + 1 < best:
                    best = cur[j - 1] + 1
                cur[j] = best
            prev, cur = cur, prev
        return prev[m]

    @numba.njit(cache=True)
    def cosine_scores_numba(table, query):
        rows, dim = table.shape
        out = np.empty(rows)
        qn = 0.0
        # np.float64 casts: float() keeps float32 under numba
        for j in range(dim):
            qn += np.float64(query[j]) * np.float64(query[j])
        qn = np.sqrt(qn)
        for i in range(rows):
            dot = 0.0
            nn = 0.0
            for j in range(dim):
                v = np.float64(table[i, j])
                dot += v * np.float64(query[j])
                nn += v * v
            if qn == 0.0 or nn == 0.0:
                out[i] = -np.inf
            else:
                out[i] = dot / (np.sqrt(nn) * qn)
        return out

    @numba.njit(cache=True)
    def topk_numba(scores, k, excluded):
        # insertion into a sorted buffer; strict '>' keeps the lower index
        # ahead on ties because indices are visited in increasing order
        idx = np.empty(k, dtype=np.int64)
        val = np.empty(k)
        filled = 0
        for i in range(scores.shape[0]):
            s = scores[i]
            if excluded[i] or s == -np.inf or np.isnan(s):
                continue
            if filled == k and not s > val[k - 1]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and s > val[pos - 1]:
                if pos < k:
                    val[pos] = val[pos - 1]
                    idx[pos] = idx[pos - 1]
                pos -= 1
            val[pos] = s
            idx[pos] = i
            if filled < k:
                filled += 1
        return idx[:filled].copy()

    @numba.njit(cache=True)
    def scatter_add_rows_numba(out, ids, rows):
        for r in range(ids.shape[0]):
            t = ids[r]
            for j in range(out.shape[1]):
                out[t, j] += rows[r, j]
        return out

    def levenshtein(a, b):
        return int(levenshtein_numba(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))

    def cosine_scores(table, query):
        return cosine_scores_numba(np.ascontiguousarray(table), np.ascontiguousarray(query))

    def topk(scores, k, excluded):
        return topk_numba(np.asarray(scores, dtype=np.float64), int(k), np.asarray(excluded, dtype=np.bool_))

    def scatter_add_rows(out, ids, rows):
        ids = np.ascontiguousarray(ids, dtype=np.int64).reshape(-1)
        rows = np.ascontiguousarray(rows).reshape(ids.shape[0], out.shape[1])
        return scatter_add_rows_numba(out, ids, rows.astype(out.dtype, copy=False))

else:
    levenshtein = levenshtein_numpy
    cosine_scores = cosine_scores_numpy
    topk = topk_numpy

    def scatter_add_rows(out, ids, rows):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        return scatter_add_rows_numpy(out, ids, np.asarray(rows).reshape(ids.shape[0], out.shape[1]))


BACKEND = "numba" if HAVE_NUMBA else "numpy"
