"""Tree-structured Parzen estimator (TPE) hyperparameter search.

After ``n_startup`` random trials, completed trials are split into the best
``ceil(gamma * n)`` ("good") and the rest ("bad"). Each parameter gets two
independent densities, l(x) from the good trials and g(x) from the bad ones.
``n_candidates`` points are drawn from l and the one maximizing
``sum(log l(x) - log g(x))`` over the active parameters is proposed.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import StudyFailed, TrainingDiverged, ValidationError

KINDS = ("uniform", "log_uniform", "int_uniform", "categorical")
BANDWIDTH_FLOOR = 1e-3


@dataclass(frozen=True)
class ParamSpec:
    """One search dimension.

    ``gate=(parent, i)`` makes the parameter active only when
    ``params[parent] > i`` (used for per-layer widths under ``n_hidden``).
    ``log=True`` on an ``int_uniform`` samples it log-uniformly.
    """

    name: str
    kind: str
    low: float | None = None
    high: float | None = None
    options: tuple = ()
    log: bool = False
    gate: tuple[str, int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.options:
                raise ValidationError(f"{self.name}: categorical needs options")
        else:
            if self.low is None or self.high is None or not self.low < self.high:
                raise ValidationError(f"{self.name}: need low < high")
            if self.is_log and self.low <= 0:
                raise ValidationError(f"{self.name}: log scale needs low > 0")

    @property
    def is_log(self) -> bool:
        return self.kind == "log_uniform" or (self.kind == "int_uniform" and self.log)

    @property
    def is_int(self) -> bool:
        return self.kind == "int_uniform"

    def bounds(self) -> tuple[float, float]:
        """Bounds in the internal (possibly log) coordinate."""
        lo, hi = float(self.low), float(self.high)
        if self.is_int:
            lo, hi = lo - 0.5, hi + 0.5
            if self.is_log:
                lo = max(lo, float(self.low) * 0.5)
        return (math.log(lo), math.log(hi)) if self.is_log else (lo, hi)

    def to_internal(self, value) -> float:
        return math.log(value) if self.is_log else float(value)

    def from_internal(self, z: float):
        lo, hi = self.bounds()
        z = min(max(z, lo), hi)
        v = math.exp(z) if self.is_log else z
        if self.is_int:
            return int(min(max(round(v), self.low), self.high))
        return float(min(max(v, self.low), self.high))

    def active(self, params: Mapping[str, Any]) -> bool:
        if self.gate is None:
            return True
        parent, i = self.gate
        return parent in params and params[parent] > i

    def to_dict(self) -> dict:
        d = asdict(self)
        d["options"] = list(self.options)
        d["gate"] = list(self.gate) if self.gate else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSpec":
        d = dict(d)
        d["options"] = tuple(d.get("options") or ())
        d["gate"] = tuple(d["gate"]) if d.get("gate") else None
        return cls(**d)


@dataclass(frozen=True)
class SearchSpace:
    specs: tuple[ParamSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        seen = set()
        for s in self.specs:
            if s.name in seen:
                raise ValidationError(f"duplicate parameter {s.name!r}")
            if s.gate is not None and s.gate[0] not in seen:
                raise ValidationError(f"{s.name}: gate parent {s.gate[0]!r} must come earlier")
            seen.add(s.name)

    def __len__(self) -> int:
        return len(self.specs)

    def to_json(self) -> str:
        return json.dumps([s.to_dict() for s in self.specs], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SearchSpace":
        return cls(tuple(ParamSpec.from_dict(d) for d in json.loads(text)))


def default_mlp_space(max_hidden: int = 3) -> SearchSpace:
    specs = [
        ParamSpec("learning_rate", "log_uniform", 1e-5, 1e-1),
        ParamSpec("batch_size", "categorical", options=(8, 16, 32, 64, 128)),
        ParamSpec("l1", "log_uniform", 1e-8, 1e-2),
        ParamSpec("l2", "log_uniform", 1e-8, 1e-2),
        ParamSpec("n_hidden", "int_uniform", 0, max_hidden),
    ]
    specs += [
        ParamSpec(f"width_{i}", "int_uniform", 2, 512, log=True, gate=("n_hidden", i))
        for i in range(max_hidden)
    ]
    specs += [
        ParamSpec("optimizer", "categorical", options=("sgd", "sgd_momentum", "rmsprop", "adam")),
        ParamSpec("activation", "categorical", options=("relu", "leaky_relu", "tanh", "sigmoid")),
    ]
    return SearchSpace(tuple(specs))


@dataclass(frozen=True)
class TpeConfig:
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.n_startup < 1 or self.n_candidates < 1 or not 0 < self.gamma < 1:
            raise ValidationError("need n_startup >= 1, n_candidates >= 1, 0 < gamma < 1")


@dataclass
class Trial:
    trial_id: int
    params: dict
    objective: float | None = None
    status: str = "complete"
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def sample_random(space: SearchSpace, rng: np.random.Generator) -> dict:
    params: dict = {}
    for spec in space.specs:
        if not spec.active(params):
            continue
        if spec.kind == "categorical":
            params[spec.name] = spec.options[int(rng.integers(len(spec.options)))]
        else:
            lo, hi = spec.bounds()
            params[spec.name] = spec.from_internal(rng.uniform(lo, hi))
    return params


# ---------------------------------------------------------------------------
# Parzen estimators


class _NumericParzen:
    """Gaussian mixture on the internal coordinate.

    One kernel per observation with a shared Scott's-rule bandwidth, plus one
    broad prior kernel (centred on the range, width = range). The bandwidth
    is floored at ``range / min(100, n + 1)`` (never below 1e-3 of the
    range); without that floor the good-trial density collapses onto the
    first cluster it finds and the search stalls.
    """

    def __init__(self, spec: ParamSpec, values: Sequence[float]):
        self.spec = spec
        self.lo, self.hi = spec.bounds()
        width = self.hi - self.lo
        self.points = np.array([spec.to_internal(v) for v in values], dtype=float)
        floor = max(BANDWIDTH_FLOOR, 1.0 / min(100, len(self.points) + 1)) * width
        if len(self.points) > 1:
            scott = float(np.std(self.points)) * len(self.points) ** (-1.0 / 5.0)
        else:
            scott = 0.0
        self.bandwidth = max(scott, floor)
        self.prior_mu, self.prior_sigma = 0.5 * (self.lo + self.hi), width
        self.mus = np.append(self.points, self.prior_mu)
        self.sigmas = np.append(np.full(len(self.points), self.bandwidth), self.prior_sigma)

    def sample(self, rng: np.random.Generator):
        k = int(rng.integers(len(self.mus)))
        return self.spec.from_internal(rng.normal(self.mus[k], self.sigmas[k]))

    def log_density(self, value) -> float:
        z = self.spec.to_internal(value)
        e = -0.5 * ((z - self.mus) / self.sigmas) ** 2 - np.log(self.sigmas)
        m = float(e.max())
        return m + math.log(float(np.exp(e - m).sum())) - math.log(len(self.mus) * math.sqrt(2 * math.pi))


class _CategoricalParzen:
    """Category frequencies with add-one smoothing."""

    def __init__(self, spec: ParamSpec, values: Sequence):
        self.options = list(spec.options)
        counts = np.ones(len(self.options))
        for v in values:
            counts[self.options.index(v)] += 1.0
        self.probs = counts / counts.sum()

    def sample(self, rng: np.random.Generator):
        return self.options[int(rng.choice(len(self.options), p=self.probs))]

    def log_density(self, value) -> float:
        return math.log(self.probs[self.options.index(value)])


def _parzen(spec: ParamSpec, trials: Sequence[Trial]):
    values = [t.params[spec.name] for t in trials if spec.name in t.params]
    if spec.kind == "categorical":
        return _CategoricalParzen(spec, values)
    return _NumericParzen(spec, values)


def split_good_bad(history: Sequence[Trial], gamma: float) -> tuple[list[Trial], list[Trial]]:
    done = [t for t in history if t.status == "complete" and t.objective is not None]
    done.sort(key=lambda t: (t.objective, t.trial_id))
    n_good = math.ceil(gamma * len(done))
    return done[:n_good], done[n_good:]


def score_candidate(params: Mapping, good_est: Mapping, bad_est: Mapping, space: SearchSpace) -> float:
    total = 0.0
    for spec in space.specs:
        if spec.name in params:
            v = params[spec.name]
            total += good_est[spec.name].log_density(v) - bad_est[spec.name].log_density(v)
    return total


def build_estimators(space: SearchSpace, good: Sequence[Trial], bad: Sequence[Trial]):
    good_est = {s.name: _parzen(s, good) for s in space.specs}
    bad_est = {s.name: _parzen(s, bad) for s in space.specs}
    return good_est, bad_est


def draw_candidates(space: SearchSpace, good_est: Mapping, n: int, rng: np.random.Generator) -> list[dict]:
    out = []
    for _ in range(n):
        params: dict = {}
        for spec in space.specs:
            if spec.active(params):
                params[spec.name] = good_est[spec.name].sample(rng)
        out.append(params)
    return out


def suggest(history: Sequence[Trial], space: SearchSpace, config: TpeConfig,
            rng: np.random.Generator) -> dict:
    if len(space) == 0:
        raise ValidationError("empty search space")
    n_done = sum(1 for t in history if t.status == "complete" and t.objective is not None)
    if n_done < config.n_startup:
        return sample_random(space, rng)
    good, bad = split_good_bad(history, config.gamma)
    good_est, bad_est = build_estimators(space, good, bad)
    candidates = draw_candidates(space, good_est, config.n_candidates, rng)
    scores = [score_candidate(c, good_est, bad_est, space) for c in candidates]
    return candidates[int(np.argmax(scores))]


@dataclass
class Study:
    best: Trial
    trials: list[Trial] = field(default_factory=list)

    def write(self, log_path: str | Path, best_path: str | Path | None = None) -> None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for t in self.trials:
                fh.write(t.to_json() + "\n")
        if best_path is not None:
            Path(best_path).write_text(json.dumps(asdict(self.best), indent=1, sort_keys=True),
                                       encoding="utf-8")


def run_study(
    objective: Callable[[dict], float],
    space: SearchSpace,
    n_trials: int,
    config: TpeConfig = TpeConfig(),
) -> tuple[Trial, list[Trial]]:
    """Sequential suggest/evaluate loop.

    Trials whose objective raises :class:`TrainingDiverged` or returns a
    non-finite value are marked failed and ignored by the estimators.
    """
    if n_trials < 1:
        raise ValidationError("n_trials must be >= 1")
    rng = np.random.default_rng(config.seed)
    trials: list[Trial] = []
    for i in range(n_trials):
        params = suggest(trials, space, config, rng)
        try:
            value = float(objective(params))
        except (TrainingDiverged, FloatingPointError) as exc:
            trials.append(Trial(i, params, None, "failed", str(exc)))
            continue
        if not math.isfinite(value):
            trials.append(Trial(i, params, None, "failed", "non-finite objective"))
            continue
        trials.append(Trial(i, params, value))
    done = [t for t in trials if t.status == "complete"]
    if not done:
        raise StudyFailed(f"all {n_trials} trials failed")
    best = min(done, key=lambda t: (t.objective, t.trial_id))
    return best, trials


def random_search(objective: Callable[[dict], float], space: SearchSpace, n_trials: int,
                  seed: int = 0) -> tuple[Trial, list[Trial]]:
    """Seeded random search; identical to a TPE study whose startup covers every trial."""
    return run_study(objective, space, n_trials, TpeConfig(n_startup=n_trials + 1, seed=seed))
