#!/usr/bin/env python3
"""Compare the numba kernels with their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported side by side from ``obfbench._kernels``; the
``OBFBENCH_NO_NUMBA`` flag only changes which one the package dispatches to.
Results are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from obfbench import _kernels as K


def cases(rng):
    a = rng.integers(4, 68, size=60)
    b = rng.integers(4, 68, size=60)
    table = rng.standard_normal((4096, 64)).astype(np.float32)
    query = rng.standard_normal(64).astype(np.float32)
    scores = K.cosine_scores_numpy(table, query)
    excluded = np.zeros(len(table), dtype=bool)
    excluded[:4] = True
    ids = rng.integers(0, 68, size=2048)
    rows = rng.standard_normal((2048, 64)).astype(np.float32)
    out = np.zeros((68, 64), dtype=np.float32)
    # argument factories: scatter_add writes in place, so each call gets a fresh buffer
    return [
        ("levenshtein 60x60", "levenshtein", lambda: (a, b)),
        ("cosine 4096x64", "cosine_scores", lambda: (table, query)),
        ("topk k=20 of 4096", "topk", lambda: (scores, 20, excluded)),
        ("scatter_add 2048 rows", "scatter_add_rows", lambda: (out.copy(), ids, rows)),
    ]


def per_call(fn, args, repeat, number):
    return min(timeit.repeat(lambda: fn(*args), repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20)
    args = ap.parse_args()

    print(f"dispatching backend: {K.BACKEND}")
    if not K.HAVE_NUMBA:
        print("numba unavailable or disabled; only the numpy column is timed")
    print(f"{'kernel':<24}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, kernel, make in cases(np.random.default_rng(0)):
        np_fn = getattr(K, f"{kernel}_numpy")
        t_np = per_call(np_fn, make(), args.repeat, args.number)
        if K.HAVE_NUMBA:
            nb_fn = getattr(K, f"{kernel}_numba")
            assert np.allclose(np_fn(*make()), nb_fn(*make())), name  # also triggers compilation
            t_nb = per_call(nb_fn, make(), args.repeat, args.number)
            print(f"{name:<24}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<24}{t_np * 1e6:>12.1f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
