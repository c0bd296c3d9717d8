"""Shapley-value feature attribution, global importance and top-k selection.

The value of a coalition S at row x is the mean model output over background
rows b of the composite row that takes coordinates in S from x and the rest
from b. :func:`shapley_exact` enumerates all coalitions; :func:`shapley_sampled`
averages marginal contributions along random feature permutations, with one
background row drawn per permutation, which is unbiased for the exact value.

``predict`` arguments are batch functions mapping an (n, D) matrix to n outputs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, ValidationError

Predict = Callable[[np.ndarray], np.ndarray]
MAX_EXACT_FEATURES = 20
_ROW_BUDGET = 1 << 17


@dataclass(frozen=True)
class AttributionConfig:
    background_rows: int = 100
    mode: str = "sampled"  # "exact" or "sampled"
    permutations: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("exact", "sampled"):
            raise ValidationError(f"unknown attribution mode {self.mode!r}")
        if self.background_rows < 1 or self.permutations < 1:
            raise ValidationError("background_rows and permutations must be >= 1")


@dataclass
class AttributionResult:
    phi: np.ndarray  # (rows, features)
    base_value: float
    rows: np.ndarray
    stderr: np.ndarray | None = None


@dataclass(frozen=True)
class GlobalImportance:
    scores: np.ndarray
    ranking: np.ndarray  # feature indices, most important first


def make_background(X_train, n_rows: int = 100, seed: int = 0) -> np.ndarray:
    """Seeded uniform subsample (without replacement) of training rows."""
    X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
    if X_train.shape[0] == 0:
        raise ValidationError("background needs at least one training row")
    if X_train.shape[0] <= n_rows:
        return X_train.copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), 31]))
    pick = np.sort(rng.choice(X_train.shape[0], size=n_rows, replace=False))
    return X_train[pick]


def _players(features, n_cols: int) -> np.ndarray:
    if features is None:
        return np.arange(n_cols)
    f = np.asarray(features, dtype=int)
    if len(np.unique(f)) != len(f) or (len(f) and (f.min() < 0 or f.max() >= n_cols)):
        raise ValidationError("feature subset must be unique valid column indices")
    return f


def _prepare(x, background) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float).ravel()
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    if bg.shape[0] == 0:
        raise ValidationError("background must have at least one row")
    if bg.shape[1] != len(x):
        raise ValidationError(f"row has {len(x)} features, background has {bg.shape[1]}")
    return x, bg


def coalition_values(predict: Predict, x, background, features=None) -> np.ndarray:
    """v(S) for every coalition mask S (bit i = ``features[i]`` taken from x).

    Columns outside ``features`` are fixed to their value in ``x``.
    """
    x, bg = _prepare(x, background)
    players = _players(features, len(x))
    d = len(players)
    if d > MAX_EXACT_FEATURES:
        raise CapacityError(f"exact enumeration limited to {MAX_EXACT_FEATURES} features, got {d}")
    base_rows = bg.copy()
    others = np.setdiff1d(np.arange(len(x)), players)
    base_rows[:, others] = x[others]
    n_masks = 1 << d
    bits = ((np.arange(n_masks)[:, None] >> np.arange(d)[None, :]) & 1).astype(bool)
    values = np.empty(n_masks)
    chunk = max(1, _ROW_BUDGET // len(bg))
    for start in range(0, n_masks, chunk):
        m = bits[start:start + chunk]
        rows = np.repeat(base_rows[None, :, :], len(m), axis=0)
        take = np.zeros((len(m), len(x)), dtype=bool)
        take[:, players] = m
        rows = np.where(take[:, None, :], x[None, None, :], rows)
        out = np.asarray(predict(rows.reshape(-1, len(x))), dtype=float)
        values[start:start + len(m)] = out.reshape(len(m), len(bg)).mean(axis=1)
    return values


def shapley_from_values(values: np.ndarray, d: int) -> np.ndarray:
    masks = np.arange(1 << d)
    size = _popcount(masks)
    fact = [math.factorial(k) for k in range(d + 1)]
    weight = np.array([fact[s] * fact[d - s - 1] / fact[d] if s < d else 0.0 for s in range(d + 1)])
    phi = np.empty(d)
    for i in range(d):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = np.sum(weight[size[without]] * (values[without | (1 << i)] - values[without]))
    return phi


def _popcount(a: np.ndarray) -> np.ndarray:
    a = a.astype(np.int64)
    count = np.zeros_like(a)
    while np.any(a):
        count += a & 1
        a >>= 1
    return count


def shapley_exact(predict: Predict, x, background, features=None) -> np.ndarray:
    """Exact Shapley values by enumerating all 2^d coalitions (d <= 20)."""
    x, bg = _prepare(x, background)
    d = len(_players(features, len(x)))
    return shapley_from_values(coalition_values(predict, x, bg, features), d)


class AffineFirstLayer:
    """Batch predictor ``head(X @ weight + bias)`` with a fast permutation chain.

    Along a permutation chain consecutive composite rows differ in a single
    coordinate, so the first-layer pre-activations are a running sum of
    rank-one updates instead of a full matrix product per row.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, head: Callable[[np.ndarray], np.ndarray]):
        self.weight = np.asarray(weight, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        self.head = head

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.head(np.atleast_2d(X) @ self.weight + self.bias)

    def chain(self, x: np.ndarray, start: np.ndarray, features: np.ndarray) -> np.ndarray:
        """Outputs at ``start`` and after switching each of ``features`` to ``x`` in turn."""
        steps = (x[features] - start[features])[:, None] * self.weight[features]
        z = np.empty((len(features) + 1, self.weight.shape[1]))
        z[0] = start @ self.weight + self.bias
        np.cumsum(steps, axis=0, out=z[1:])
        z[1:] += z[0]
        return self.head(z)


def _perm_rng(seed: int, row: int, m: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), row, m]))


def _block_rng(seed: int, row: int, cycle: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), row, cycle, 1]))


def shapley_sampled(
    predict: Predict,
    x,
    background,
    permutations: int = 2000,
    seed: int = 0,
    features=None,
    row_key: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Permutation-sampling estimate; returns ``(phi, standard_error)``.

    Permutations come in antithetic pairs: pair ``j`` draws an order from a
    stream keyed on ``(seed, row_key, j)`` and its partner walks the reversed
    order. Each pair takes one background row, visiting the rows in shuffled
    blocks so every row is used equally often. Every permutation is still
    uniform and every row still uniform at each position, so the estimate
    stays unbiased; the standard error is computed over pair means.
    """
    if permutations < 1:
        raise ValidationError("permutations must be >= 1")
    x, bg = _prepare(x, background)
    players = _players(features, len(x))
    d = len(players)
    D = len(x)
    others = np.setdiff1d(np.arange(D), players)
    total = np.zeros(d)
    unit_sum = np.zeros(d)
    unit_sq = np.zeros(d)
    pair = np.zeros(d)
    blocks: dict[int, np.ndarray] = {}

    def draw(m: int) -> tuple[np.ndarray, np.ndarray]:
        j = m // 2
        order = _perm_rng(seed, row_key, j).permutation(d)
        if m % 2:
            order = order[::-1]
        cycle, pos = divmod(j, len(bg))
        if cycle not in blocks:
            blocks.clear()
            blocks[cycle] = _block_rng(seed, row_key, cycle).permutation(len(bg))
        b = bg[blocks[cycle][pos]].copy()
        b[others] = x[others]
        return order, b

    def accumulate(m: int, order: np.ndarray, f: np.ndarray) -> None:
        contrib = np.empty(d)
        contrib[order] = np.diff(f)
        total[:] += contrib
        pair[:] += contrib
        if m % 2 or m == permutations - 1:
            unit = pair / (2 if m % 2 else 1)
            unit_sum[:] += unit
            unit_sq[:] += unit * unit
            pair[:] = 0.0

    if isinstance(predict, AffineFirstLayer):
        for m in range(permutations):
            order, b = draw(m)
            accumulate(m, order, np.asarray(predict.chain(x, b, players[order]), dtype=float))
    else:
        steps = np.arange(d + 1)[:, None]
        chunk = max(1, _ROW_BUDGET // ((d + 1) * max(1, D // 64)))
        for start in range(0, permutations, chunk):
            rows, orders = [], []
            ms = range(start, min(permutations, start + chunk))
            for m in ms:
                order, b = draw(m)
                rank = np.empty(d, dtype=int)
                rank[order] = np.arange(d)
                take = np.zeros((d + 1, D), dtype=bool)
                take[:, players] = rank[None, :] < steps
                rows.append(np.where(take, x[None, :], b[None, :]))
                orders.append(order)
            out = np.asarray(predict(np.concatenate(rows)), dtype=float).reshape(len(orders), d + 1)
            for m, order, f in zip(ms, orders, out):
                accumulate(m, order, f)
    mean = total / permutations
    units = (permutations + 1) // 2
    if units > 1:
        u = unit_sum / units
        var = np.maximum(unit_sq / units - u * u, 0.0) * units / (units - 1)
        stderr = np.sqrt(var / units)
    else:
        stderr = np.full(d, np.inf)
    return mean, stderr


def explain(predict: Predict, rows, background, config: AttributionConfig = AttributionConfig(),
            features=None) -> AttributionResult:
    """Attribute every row of ``rows``; the base value is the mean background output."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    if rows.shape[0] == 0:
        raise ValidationError("nothing to explain")
    phis, errs = [], []
    for r, x in enumerate(rows):
        if config.mode == "exact":
            phis.append(shapley_exact(predict, x, bg, features))
        else:
            phi, se = shapley_sampled(predict, x, bg, config.permutations, config.seed, features, r)
            phis.append(phi)
            errs.append(se)
    base = float(np.mean(predict(bg)))
    return AttributionResult(np.array(phis), base, np.arange(rows.shape[0]),
                             np.array(errs) if errs else None)


def global_importance(phi) -> GlobalImportance:
    """Mean |phi| per feature, ranked descending; ties go to the lower index."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    if phi.shape[0] == 0:
        raise ValidationError("no attributions to aggregate")
    scores = np.mean(np.abs(phi), axis=0)
    ranking = np.lexsort((np.arange(len(scores)), -scores))
    return GlobalImportance(scores, ranking)


def select_top_k(importance: GlobalImportance, k: int = 20) -> np.ndarray:
    d = len(importance.scores)
    if not 1 <= k <= d:
        raise ValidationError(f"k must lie in [1, {d}], got {k}")
    return importance.ranking[:k].copy()


@dataclass(frozen=True)
class AblationPoint:
    k: int
    setting: str
    test_r2: float
    test_rmse: float


def ablation_sweep(
    k_values: Sequence[int],
    retrain: Callable[[int], Mapping[str, tuple[float, float]]],
    n_features: int,
) -> list[AblationPoint]:
    """Retrain at each k (ascending) and at the full width ``n_features``.

    ``retrain(k)`` returns ``{setting: (test_r2, test_rmse)}``.
    """
    ks = list(k_values)
    if any(k < 1 or k > n_features for k in ks):
        raise ValidationError(f"every k must lie in [1, {n_features}]")
    if ks != sorted(ks) or len(set(ks)) != len(ks):
        raise ValidationError("k values must be strictly ascending")
    if not ks or ks[-1] != n_features:
        ks.append(n_features)
    points = []
    for k in ks:
        for setting, (r2_, rmse_) in retrain(k).items():
            points.append(AblationPoint(k, setting, float(r2_), float(rmse_)))
    return points


def write_importance_csv(path: str | Path, importance: GlobalImportance, names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "feature_name", "mean_abs_shap"])
        for rank, idx in enumerate(importance.ranking, start=1):
            w.writerow([rank, names[idx], format(float(importance.scores[idx]), ".17g")])


def write_phi_summary_csv(path: str | Path, phi: np.ndarray, feature_values: np.ndarray,
                          names: Sequence[str], selected: Sequence[int]) -> None:
    """Per-row phi and feature value for the selected features (beeswarm plot data)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_name", "row", "shap_value", "feature_value"])
        for idx in selected:
            for r in range(phi.shape[0]):
                w.writerow([names[idx], r, format(float(phi[r, idx]), ".17g"),
                            format(float(feature_values[r, idx]), ".17g")])


def write_ablation_csv(path: str | Path, points: Sequence[AblationPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "technique", "test_r2", "test_rmse"])
        for p in points:
            w.writerow([p.k, p.setting, format(p.test_r2, ".17g"), format(p.test_rmse, ".17g")])
