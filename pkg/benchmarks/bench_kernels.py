"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats 5] [--forest]

Each kernel is run on inputs shaped like the ones training produces: a split
search over a forest node of the sparse window feature matrix, and the
embedding-gradient scatter of a training batch. ``--forest`` also times a
whole forest fit in a subprocess per backend.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from iocseq import kernels


def best_time(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def split_inputs(rng, n=3000, d=4599, k=67, n_classes=4):
    # mostly-zero indicators plus a few dense numeric columns, like window features
    X = (rng.random((n, d)) < 0.02).astype(np.float32)
    X[:, -63:] = rng.lognormal(2.0, 1.0, (n, 63)).astype(np.float32)
    y = rng.integers(0, n_classes, n).astype(np.intp)
    idx = np.sort(rng.choice(n, 2 * n // 3, replace=False)).astype(np.intp)
    feats = rng.choice(d, k, replace=False).astype(np.intp)
    feats[:5] = d - 1 - np.arange(5)  # some numeric columns with many thresholds
    return X, y, idx, feats, n_classes


def scatter_inputs(rng, batch=32, w=21, slots=8, vocab=218, dim=32):
    ids = rng.integers(0, vocab, batch * w * slots).astype(np.intp)
    src = rng.standard_normal((ids.size, dim)).astype(np.float32)
    return np.zeros((vocab, dim), np.float32), ids, src


FOREST_SNIPPET = """
import time, numpy as np
from iocseq import kernels, forest
rng = np.random.default_rng(0)
X = (rng.random((1500, 4599)) < 0.02).astype(np.float32)
X[:, -63:] = rng.lognormal(2.0, 1.0, (1500, 63))
y = (X[:, :40].sum(axis=1) + rng.integers(0, 2, 1500)) % 4
t0 = time.perf_counter()
forest.fit_forest(forest.ForestConfig(n_trees=10, seed=0), X, y, 4)
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--forest", action="store_true", help="also time a full forest fit")
    args = ap.parse_args(argv)

    if kernels.compiled is None:
        print("compiled kernels are not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    X, y, idx, feats, nc = split_inputs(rng)
    out, ids, src = scatter_inputs(rng)
    backends = [("numpy", kernels.pure)]
    if kernels.compiled is not None:
        backends.append(("cython", kernels.compiled))

    print(f"{'kernel':<18} {'backend':<8} {'best (ms)':>10} {'speed-up':>9}")
    for name, call in (
        ("best_gini_split", lambda m: m.best_gini_split(X, y, idx, feats, nc)),
        ("scatter_add_rows", lambda m: m.scatter_add_rows(out, ids, src)),
    ):
        base = None
        results = [call(m) for _, m in backends]
        if name == "best_gini_split" and len(results) == 2:
            assert results[0][0] == results[1][0], "backends chose different split features"
        for label, mod in backends:
            t = best_time(lambda: call(mod), args.repeats)
            base = base or t
            print(f"{name:<18} {label:<8} {t * 1e3:10.3f} {base / t:8.1f}x")

    if args.forest:
        for pure in ("1", ""):
            env = dict(os.environ, IOCSEQ_PURE=pure)
            res = subprocess.run([sys.executable, "-c", FOREST_SNIPPET], env=env,
                                 capture_output=True, text=True, check=True)
            backend, secs = res.stdout.split()
            print(f"{'fit_forest (10)':<18} {backend:<8} {float(secs) * 1e3:10.1f}")


if __name__ == "__main__":
    main()
