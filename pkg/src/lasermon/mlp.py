"""Multi-layer perceptron regressor trained with mini-batch backpropagation.

Loss is the mean squared error plus ``l1 * sum|w| + l2 * sum w**2`` over the
weight matrices (biases are not penalized). The output layer is linear.

Optimizer updates, with gradient ``g`` and learning rate ``lr``::

    sgd           w -= lr * g
    sgd_momentum  v = 0.9 * v - lr * g;  w += v
    rmsprop       s = 0.9 * s + 0.1 * g**2;  w -= lr * g / (sqrt(s) + 1e-8)
    adam          m = 0.9 m + 0.1 g;  s = 0.999 s + 0.001 g**2
                  w -= lr * (m / (1 - 0.9**t)) / (sqrt(s / (1 - 0.999**t)) + 1e-8)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import TrainingDiverged, ValidationError
from .preprocess import NormalizationStats, apply_minmax

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid")
OPTIMIZERS = ("sgd", "sgd_momentum", "rmsprop", "adam")
LEAKY_SLOPE = 0.01
MOMENTUM = 0.9
RMS_DECAY = 0.9
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_widths: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValidationError("input_dim must be positive")
        if any(w < 1 for w in self.hidden_widths):
            raise ValidationError("hidden widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, 1]


@dataclass
class MlpModel:
    architecture: MlpArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    stats: NormalizationStats | None = None

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.architecture,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.stats,
        )

    def transform(self, X) -> np.ndarray:
        """Normalize raw inputs with the bound statistics (identity when unbound)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return apply_minmax(X, self.stats) if self.stats is not None else X


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    l1: float = 0.0
    l2: float = 0.0
    optimizer: str = "adam"
    seed: int = 0
    early_stopping_patience: int = 50

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("learning_rate >= 0, batch_size >= 1, max_epochs >= 1 required")
        if self.l1 < 0 or self.l2 < 0:
            raise ValidationError("penalties must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 when no epoch ran


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if kind == "tanh":
        return np.tanh(z)
    return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic, overflow-free


def _activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if kind == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def init_model(arch: MlpArchitecture, seed: int = 0, stats: NormalizationStats | None = None) -> MlpModel:
    """He-uniform for (leaky) ReLU, Glorot-uniform for tanh/sigmoid; zero biases."""
    rng = np.random.default_rng(seed)
    sizes = arch.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if arch.activation in ("relu", "leaky_relu"):
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(arch, weights, biases, stats)


def _check_inputs(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.architecture.input_dim:
        raise ValidationError(
            f"expected {model.architecture.input_dim} inputs, got {X.shape[1]}"
        )
    return X, single


def _forward(model: MlpModel, X: np.ndarray):
    kind = model.architecture.activation
    pre, post = [], [X]
    a = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = z if i == last else _activate(z, kind)
        pre.append(z)
        post.append(a)
    return pre, post


def predict(model: MlpModel, X):
    X, single = _check_inputs(model, X)
    _, post = _forward(model, X)
    out = post[-1][:, 0]
    return float(out[0]) if single else out


def _penalty(model: MlpModel, l1: float, l2: float) -> float:
    total = 0.0
    if l1:
        total += l1 * sum(float(np.abs(w).sum()) for w in model.weights)
    if l2:
        total += l2 * sum(float((w * w).sum()) for w in model.weights)
    return total


def _batch(model: MlpModel, X, y):
    X, _ = _check_inputs(model, X)
    y = np.asarray(y, dtype=float).ravel()
    if len(y) == 0:
        raise ValidationError("empty batch")
    if len(y) != X.shape[0]:
        raise ValidationError(f"{X.shape[0]} rows vs {len(y)} targets")
    return X, y


def loss(model: MlpModel, X, y, l1: float = 0.0, l2: float = 0.0) -> float:
    X, y = _batch(model, X, y)
    r = predict(model, X) - y
    return float(np.dot(r, r) / len(y)) + _penalty(model, l1, l2)


def gradients(model: MlpModel, X, y, l1: float = 0.0, l2: float = 0.0):
    """Analytic gradient of :func:`loss`; returns ``(weight_grads, bias_grads)``.

    The L1 term uses ``sign(w)`` with ``sign(0) = 0``.
    """
    X, y = _batch(model, X, y)
    kind = model.architecture.activation
    pre, post = _forward(model, X)
    delta = (2.0 / len(y)) * (post[-1][:, 0] - y)[:, None]
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        w = model.weights[i]
        g = post[i].T @ delta
        if l1:
            g = g + l1 * np.sign(w)
        if l2:
            g = g + 2.0 * l2 * w
        gw[i] = g
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ w.T) * _activation_grad(pre[i - 1], post[i], kind)
    return gw, gb


class _Optimizer:
    def __init__(self, kind: str, lr: float, params: Sequence[np.ndarray]):
        self.kind, self.lr, self.t = kind, lr, 0
        self.m = [np.zeros_like(p) for p in params]
        self.s = [np.zeros_like(p) for p in params]
        self._a = [np.empty_like(p) for p in params]
        self._b = [np.empty_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        # in-place forms of the textbook updates; a and b are scratch buffers
        self.t += 1
        lr = self.lr
        for p, g, m, s, a, b in zip(params, grads, self.m, self.s, self._a, self._b):
            if self.kind == "sgd":
                np.multiply(g, lr, out=a)
                p -= a
            elif self.kind == "sgd_momentum":
                m *= MOMENTUM
                np.multiply(g, lr, out=a)
                m -= a
                p += m
            elif self.kind == "rmsprop":
                s *= RMS_DECAY
                np.multiply(g, g, out=a)
                a *= 1.0 - RMS_DECAY
                s += a
                np.sqrt(s, out=b)
                b += ADAM_EPS
                np.multiply(g, lr, out=a)
                a /= b
                p -= a
            else:
                m *= ADAM_BETA1
                np.multiply(g, 1.0 - ADAM_BETA1, out=a)
                m += a
                s *= ADAM_BETA2
                np.multiply(g, g, out=a)
                a *= 1.0 - ADAM_BETA2
                s += a
                np.divide(s, 1.0 - ADAM_BETA2**self.t, out=b)
                np.sqrt(b, out=b)
                b += ADAM_EPS
                np.divide(m, 1.0 - ADAM_BETA1**self.t, out=a)
                a *= lr
                a /= b
                p -= a


def _mse(model: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    r = predict(model, X) - y
    return float(np.dot(r, r) / len(y))


def train(
    model: MlpModel,
    X_train,
    y_train,
    X_val,
    y_val,
    config: TrainConfig,
) -> tuple[MlpModel, TrainHistory]:
    """Mini-batch training with early stopping on validation MSE.

    Returns a copy holding the parameters of the best-validation epoch.
    """
    X_train, y_train = _batch(model, X_train, y_train)
    X_val, y_val = _batch(model, X_val, y_val)
    rng = np.random.default_rng(config.seed)
    work = model.copy()
    params = [*work.weights, *work.biases]
    n_w = len(work.weights)
    opt = _Optimizer(config.optimizer, config.learning_rate, params)
    history = TrainHistory()
    best, best_val, wait = work.copy(), np.inf, 0
    n = len(y_train)

    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                gw, gb = gradients(work, X_train[idx], y_train[idx], config.l1, config.l2)
                opt.step(params, [*gw, *gb])
            tr = _mse(work, X_train, y_train)
            va = _mse(work, X_val, y_val)
            if not (np.isfinite(tr) and np.isfinite(va)) or not all(
                np.all(np.isfinite(p)) for p in params[:n_w]
            ):
                raise TrainingDiverged(epoch)
            history.train_mse.append(tr)
            history.val_mse.append(va)
            if va < best_val:
                best_val, wait = va, 0
                best = work.copy()
                history.best_epoch = epoch
            else:
                wait += 1
                if wait >= config.early_stopping_patience:
                    break
    return best, history


def fit_epochs(model: MlpModel, X, y, config: TrainConfig, epochs: int) -> MlpModel:
    """Train on all rows for a fixed number of epochs and keep the final weights."""
    cfg = replace(config, max_epochs=max(1, int(epochs)), early_stopping_patience=max(1, int(epochs)) + 1)
    X, y = _batch(model, X, y)
    rng = np.random.default_rng(cfg.seed)
    work = model.copy()
    params = [*work.weights, *work.biases]
    opt = _Optimizer(cfg.optimizer, cfg.learning_rate, params)
    n = len(y)
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                gw, gb = gradients(work, X[idx], y[idx], cfg.l1, cfg.l2)
                opt.step(params, [*gw, *gb])
            if not np.isfinite(_mse(work, X, y)):
                raise TrainingDiverged(epoch)
    return work


# ---------------------------------------------------------------------------
# persistence


def model_to_dict(model: MlpModel) -> dict:
    arch = model.architecture
    return {
        "format_version": FORMAT_VERSION,
        "architecture": {"input_dim": arch.input_dim, "hidden_widths": list(arch.hidden_widths)},
        "activation": arch.activation,
        "weights": [w.ravel(order="C").tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "normalization": model.stats.to_dict() if model.stats is not None else None,
    }


def model_from_dict(doc: dict) -> MlpModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported model format {doc.get('format_version')!r}")
    arch = MlpArchitecture(
        doc["architecture"]["input_dim"],
        tuple(doc["architecture"]["hidden_widths"]),
        doc["activation"],
    )
    sizes = arch.layer_sizes
    weights = [
        np.asarray(w, dtype=float).reshape(a, b)
        for w, a, b in zip(doc["weights"], sizes[:-1], sizes[1:])
    ]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    stats = NormalizationStats.from_dict(doc["normalization"]) if doc.get("normalization") else None
    return MlpModel(arch, weights, biases, stats)


def save_model(model: MlpModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path: str | Path) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def attribution_predictor(model: MlpModel):
    """Wrap ``model`` for :mod:`lasermon.attribution` (inputs already normalized)."""
    from .attribution import AffineFirstLayer

    kind = model.architecture.activation
    last = len(model.weights) - 1

    def head(z: np.ndarray) -> np.ndarray:
        a = z if last == 0 else _activate(z, kind)
        for i in range(1, last + 1):
            z = a @ model.weights[i] + model.biases[i]
            a = z if i == last else _activate(z, kind)
        return a[:, 0]

    return AffineFirstLayer(model.weights[0], model.biases[0], head)
