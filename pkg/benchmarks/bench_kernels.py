"""Benchmark the compiled kernels against the pure-numpy fallback.

Times the two hot kernels (pixel assignment, segment sums) and the full
spherical K-Means loop under both backends.

    python benchmarks/bench_kernels.py
"""

from __future__ import annotations

import time

import numpy as np

from vmfseg import _kernels_py, backend
from vmfseg.core import TrainConfig, normalize_map
from vmfseg.kmeans import spherical_kmeans

try:
    from vmfseg import _kernels as _compiled
except ImportError:
    _compiled = None


def timeit(fn, repeats=5):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return np.ascontiguousarray(v / np.linalg.norm(v, axis=1, keepdims=True))


def bench_kernels():
    rng = np.random.default_rng(0)
    rows = []
    for n, k, d in [(4096, 25, 34), (16384, 25, 34), (16384, 64, 34), (65536, 25, 66)]:
        vectors = unit_rows(rng, n, d)
        protos = unit_rows(rng, k, d)
        labels, _ = _kernels_py.assign(vectors, protos)

        for name, args in [
            ("assign", (vectors, protos)),
            ("segment_sums", (vectors, labels, k)),
        ]:
            t_py = timeit(lambda: getattr(_kernels_py, name)(*args))
            t_cy = timeit(lambda: getattr(_compiled, name)(*args)) if _compiled else np.nan
            rows.append((name, f"n={n} k={k} d={d}", t_cy, t_py))
    return rows


def bench_kmeans():
    rng = np.random.default_rng(1)
    rows = []
    for size, k in [(64, 25), (128, 25)]:
        emb = normalize_map(rng.normal(size=(size, size, 32)))
        cfg = TrainConfig(num_clusters=k, em_iters=10)

        def run():
            spherical_kmeans(emb, cfg)

        saved = (backend.assign, backend.segment_sums)
        try:
            if _compiled is not None:
                backend.assign, backend.segment_sums = _compiled.assign, _compiled.segment_sums
                t_cy = timeit(run, repeats=3)
            else:
                t_cy = np.nan
            backend.assign, backend.segment_sums = _kernels_py.assign, _kernels_py.segment_sums
            t_py = timeit(run, repeats=3)
        finally:
            backend.assign, backend.segment_sums = saved
        rows.append(("spherical_kmeans", f"{size}x{size} k={k} d=32 iters=10", t_cy, t_py))
    return rows


def main():
    if _compiled is None:
        print("compiled extension unavailable; timing the numpy fallback only")
    print(f"{'kernel':<18} {'problem':<28} {'compiled':>10} {'numpy':>10} {'speedup':>8}")
    for name, problem, t_cy, t_py in bench_kernels() + bench_kmeans():
        ratio = t_py / t_cy if t_cy == t_cy else float("nan")
        cy = f"{t_cy * 1e3:8.2f}ms" if t_cy == t_cy else "      n/a"
        print(f"{name:<18} {problem:<28} {cy:>10} {t_py * 1e3:8.2f}ms {ratio:7.2f}x")


if __name__ == "__main__":
    main()
