"""Regression metrics: MSE, RMSE and the coefficient of determination."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DegenerateTarget, ValidationError


def _pair(y, y_hat, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.shape != y_hat.shape:
        raise ValidationError(f"length mismatch: {y.shape[0]} targets vs {y_hat.shape[0]} predictions")
    if len(y) < min_len:
        raise ValidationError(f"need at least {min_len} observations, got {len(y)}")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    r = y - y_hat
    return float(np.dot(r, r) / len(r))


def rmse(y, y_hat) -> float:
    return float(np.sqrt(mse(y, y_hat)))


def r2(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat, min_len=2)
    centred = y - y.mean()
    total = float(np.dot(centred, centred))
    if total == 0.0:
        raise DegenerateTarget("R² undefined for a constant target")
    r = y - y_hat
    return 1.0 - float(np.dot(r, r)) / total


@dataclass(frozen=True)
class MetricsReport:
    setting: str
    train_r2: float
    test_r2: float
    train_rmse: float
    test_rmse: float
    n_train: int
    n_test: int
    model: str = "mlp"

    @classmethod
    def evaluate(cls, setting: str, y_train, p_train, y_test, p_test, model: str = "mlp"):
        return cls(
            setting=setting,
            train_r2=r2(y_train, p_train),
            test_r2=r2(y_test, p_test),
            train_rmse=rmse(y_train, p_train),
            test_rmse=rmse(y_test, p_test),
            n_train=len(y_train),
            n_test=len(y_test),
            model=model,
        )

    def to_dict(self) -> dict:
        return asdict(self)
