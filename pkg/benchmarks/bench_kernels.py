"""Compare the compiled tree kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 400] [--features 25] [--repeat 5]

Prints the best-of-``repeat`` wall time per call for each kernel and for a
full extra-trees fit, plus the speed-up of the compiled backend.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from lasermon import _kernels, _tree_py, forest

try:
    from lasermon import _tree_core
except ImportError:
    _tree_core = None


def best_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def fit_with(backend, X, y, n_trees):
    saved = {n: getattr(_kernels, n) for n in ("best_split", "random_split", "predict_tree")}
    try:
        for name in saved:
            setattr(_kernels, name, getattr(backend, name))
        return forest.fit_model("et", X, y, n_trees=n_trees, seed=0)
    finally:
        for name, fn in saved.items():
            setattr(_kernels, name, fn)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=400)
    ap.add_argument("--features", type=int, default=25)
    ap.add_argument("--trees", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _tree_core is None:
        raise SystemExit("compiled kernels are not built; reinstall with Cython available")

    rng = np.random.default_rng(0)
    X = rng.normal(size=(args.rows, args.features))
    y = X[:, 0] ** 2 + np.sin(X[:, 1]) + 0.1 * rng.normal(size=args.rows)
    idx = np.arange(args.rows, dtype=np.intp)
    feats = np.arange(args.features, dtype=np.intp)
    u = rng.random(args.features)
    tree = forest.fit_tree(X, y)
    arrays = (tree.feature, tree.threshold, tree.left, tree.right, tree.value, X)

    cases = {
        "best_split": lambda b: b.best_split(X, y, idx, feats, 1),
        "random_split": lambda b: b.random_split(X, y, idx, feats, u, 1),
        "predict_tree": lambda b: b.predict_tree(*arrays),
        f"fit et x{args.trees}": lambda b: fit_with(b, X, y, args.trees),
    }
    print(f"rows={args.rows} features={args.features} repeat={args.repeat}")
    print(f"{'kernel':<16}{'python [ms]':>14}{'cython [ms]':>14}{'speed-up':>10}")
    for name, call in cases.items():
        slow = best_time(lambda: call(_tree_py), args.repeat)
        fast = best_time(lambda: call(_tree_core), args.repeat)
        print(f"{name:<16}{slow * 1e3:>14.3f}{fast * 1e3:>14.3f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
