"""Min-max normalization, stratified train/test split and k-fold planning."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

SampleKey = tuple  # (experiment_id, sample_id)


@dataclass(frozen=True)
class NormalizationStats:
    min: np.ndarray
    max: np.ndarray
    columns: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist(), "columns": list(self.columns)}

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationStats":
        return cls(
            np.asarray(data["min"], dtype=float),
            np.asarray(data["max"], dtype=float),
            tuple(data.get("columns", ())),
        )


def fit_minmax(matrix, columns: Sequence[str] = ()) -> NormalizationStats:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValidationError("fit_minmax needs a 2-d matrix with at least one row")
    if columns and len(columns) != m.shape[1]:
        raise ValidationError("column names do not match the matrix width")
    return NormalizationStats(m.min(axis=0), m.max(axis=0), tuple(columns))


def apply_minmax(matrix, stats: NormalizationStats) -> np.ndarray:
    """Scale to [0, 1] using training extremes; out-of-range rows are not clamped."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[1] != len(stats.min):
        raise ValidationError(
            f"expected {len(stats.min)} columns, got shape {m.shape}"
        )
    span = stats.max - stats.min
    safe = np.where(span > 0, span, 1.0)
    out = (m - stats.min) / safe
    out[:, span == 0] = 0.0
    return out


def invert_minmax(matrix, stats: NormalizationStats) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    return stats.min + m * (stats.max - stats.min)


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple[SampleKey, ...]
    test_ids: tuple[SampleKey, ...]
    seed: int
    ratio: float = 0.8


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: dict  # id -> fold index
    seed: int

    def fold_ids(self, fold: int) -> list[SampleKey]:
        return [i for i, f in self.folds.items() if f == fold]

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.folds.values():
            counts[f] += 1
        return counts


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & ((1 << 64) - 1), *keys]))


def split(
    groups: Mapping[Hashable, Sequence[SampleKey]],
    ratio: float = 0.8,
    seed: int = 0,
) -> SplitPlan:
    """Shuffle each group with its own seeded stream and send the first
    ``floor(ratio * n)`` ids to training.

    Groups are visited in sorted-key order so the plan does not depend on
    mapping insertion order.
    """
    if not 0 < ratio < 1:
        raise ValidationError("ratio must lie in (0, 1)")
    train, test = [], []
    for g_index, key in enumerate(sorted(groups, key=str)):
        ids = list(groups[key])
        if len(ids) < 5:
            raise ValidationError(f"group {key!r} has {len(ids)} samples; need at least 5")
        order = _rng(seed, 17, g_index).permutation(len(ids))
        n_train = math.floor(ratio * len(ids))
        train.extend(ids[i] for i in order[:n_train])
        test.extend(ids[i] for i in order[n_train:])
    return SplitPlan(tuple(train), tuple(test), seed, ratio)


def kfold(train_ids: Sequence[SampleKey], k: int = 4, seed: int = 0) -> FoldPlan:
    if k < 2:
        raise ValidationError("k must be >= 2")
    if len(train_ids) < k:
        raise ValidationError(f"need at least k={k} ids, got {len(train_ids)}")
    order = _rng(seed, 23).permutation(len(train_ids))
    folds = {train_ids[i]: pos % k for pos, i in enumerate(order)}
    return FoldPlan(k, folds, seed)


def _key_to_json(key: SampleKey):
    return list(key) if isinstance(key, tuple) else key


def save_plan(path: str | Path, plan: SplitPlan, folds: FoldPlan | None = None) -> None:
    doc = {
        "seed": plan.seed,
        "ratio": plan.ratio,
        "train_ids": [_key_to_json(i) for i in plan.train_ids],
        "test_ids": [_key_to_json(i) for i in plan.test_ids],
    }
    if folds is not None:
        doc["k"] = folds.k
        doc["fold_seed"] = folds.seed
        doc["folds"] = [[_key_to_json(i), f] for i, f in folds.folds.items()]
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_plan(path: str | Path) -> tuple[SplitPlan, FoldPlan | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    to_key = lambda v: tuple(v) if isinstance(v, list) else v  # noqa: E731
    plan = SplitPlan(
        tuple(to_key(i) for i in doc["train_ids"]),
        tuple(to_key(i) for i in doc["test_ids"]),
        doc["seed"],
        doc.get("ratio", 0.8),
    )
    folds = None
    if "folds" in doc:
        folds = FoldPlan(doc["k"], {to_key(i): f for i, f in doc["folds"]}, doc["fold_seed"])
    return plan, folds
