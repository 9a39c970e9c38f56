"""Compiled vs pure-Python Hungarian kernels.

Times the dense assignment kernel on square cost matrices and full Hungarian
pooling on kNN-style candidate graphs, for every available backend, and checks
that both backends return the same selection.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import sys
import timeit

import numpy as np

from gamloc import hungarian


def dense_case(n, seed):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, n))


def graph_case(M, N, K, seed):
    rng = np.random.default_rng(seed)
    eu = np.repeat(np.arange(M), K)
    ev = np.concatenate([rng.choice(N, K, replace=False) for _ in range(M)])
    return eu, ev, rng.uniform(0, 1, size=len(eu)), M, N


def best_time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 1 << 16:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="write the timing table here")
    a = ap.parse_args(argv)
    backends = sorted(hungarian._KERNELS)
    if "cython" not in backends:
        print("compiled extension not built; timing the Python fallback only", file=sys.stderr)
    rows = []

    for n in (8, 32, 128, 256):
        W = dense_case(n, n)
        ref = None
        row = {"case": f"dense {n}x{n}"}
        for b in backends:
            out = hungarian.max_weight_assignment(W, backend=b)
            cols = out[1].tolist()
            ref = cols if ref is None else ref
            assert cols == ref, "backends disagree"
            row[b] = best_time(lambda: hungarian.max_weight_assignment(W, backend=b), a.repeat)
        rows.append(row)

    for M, N, K in ((64, 200, 3), (512, 512, 3), (2000, 2000, 3)):
        eu, ev, w, m, nn = graph_case(M, N, K, M)
        ref = None
        row = {"case": f"pooling M={M} N={N} K={K}"}
        for b in backends:
            s = hungarian.match_edges(eu, ev, w, m, nn, backend=b)
            ref = s if ref is None else ref
            assert np.array_equal(s, ref), "backends disagree"
            row[b] = best_time(lambda: hungarian.match_edges(eu, ev, w, m, nn, backend=b), a.repeat)
        rows.append(row)

    head = f"{'case':<28}" + "".join(f"{b:>14}" for b in backends) + ("     speedup" if len(backends) > 1 else "")
    print(head)
    for row in rows:
        line = f"{row['case']:<28}" + "".join(f"{row[b] * 1e3:>12.3f}ms" for b in backends)
        if "cython" in row and "python" in row:
            row["speedup"] = row["python"] / row["cython"]
            line += f"{row['speedup']:>11.1f}x"
        print(line)
    if a.json:
        with open(a.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
