"""End-to-end experiment runner: params-only, params+sensors and reduced-feature models.

Every setting (one preprocessing technique, or all of them combined) goes
through the same steps: split, fit min-max statistics on its training rows,
choose an MLP configuration (fixed, or by a TPE study over k-fold CV), refit,
and score. The reduced experiment ranks the sensor block by mean |Shapley|
of the full model and retrains tree models on the top-k features.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__, _kernels
from . import attribution as attr
from . import forest, hpo, mlp
from . import preprocess as pp
from .dataset import TECHNIQUES, Sample, SyntheticConfig, iter_synthetic, load_dataset
from .errors import LasermonError, ValidationError
from .features import (
    DEFAULT_BANDS, PARAM_COLUMNS, extract_sample, feature_names, parameter_row,
)
from .metrics import MetricsReport, mse

SETTINGS = (*(t.value for t in TECHNIQUES), "combined")
LABELS = dict(zip(SETTINGS, "abcdef"))
DISPLAY = {
    "milling": "Milling",
    "grinding": "Grinding",
    "polishing": "Polishing",
    "die_edm": "Die-EDM",
    "wire_edm": "Wire-EDM",
    "combined": "Combined",
}
EXPERIMENTS = ("params_only", "params_plus_sensors", "reduced")
N_PARAMS = len(PARAM_COLUMNS)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelSpec:
    """MLP architecture plus optimizer settings for one experiment."""

    hidden_widths: tuple[int, ...]
    activation: str
    train: mlp.TrainConfig

    def architecture(self, input_dim: int) -> mlp.MlpArchitecture:
        return mlp.MlpArchitecture(input_dim, self.hidden_widths, self.activation)

    def to_dict(self) -> dict:
        return {
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
            "train": asdict(self.train),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(d["hidden_widths"]), d["activation"], mlp.TrainConfig(**d["train"]))

    def with_params(self, params: Mapping) -> "ModelSpec":
        """Overlay a TPE trial's parameters; names missing from the trial keep their value."""
        widths = self.hidden_widths
        if "n_hidden" in params:
            widths = tuple(int(params[f"width_{i}"]) for i in range(int(params["n_hidden"])))
        train = replace(
            self.train,
            **{k: params[k] for k in ("learning_rate", "batch_size", "l1", "l2", "optimizer")
               if k in params},
        )
        return ModelSpec(widths, params.get("activation", self.activation), train)


PARAMS_ONLY_SPEC = ModelSpec(
    (3,), "tanh",
    mlp.TrainConfig(learning_rate=1e-2, batch_size=16, max_epochs=1000, early_stopping_patience=100),
)
FULL_SPEC = ModelSpec(
    (64, 16), "relu",
    mlp.TrainConfig(learning_rate=1e-3, batch_size=16, max_epochs=300, l2=1e-4,
                    early_stopping_patience=30),
)


@dataclass
class RunConfig:
    """Everything that determines a run's outputs (``threads`` excepted)."""

    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    dataset: str | None = None
    settings: tuple[str, ...] = SETTINGS
    seed: int = 42
    split_ratio: float = 0.8
    k_folds: int = 4
    params_only_model: ModelSpec = PARAMS_ONLY_SPEC
    full_model: ModelSpec = FULL_SPEC
    hpo_trials: int = 0
    hpo_epochs: int = 200
    hpo_patience: int = 20
    space: hpo.SearchSpace | None = None
    tpe_startup: int = 10
    shared_arch: bool = False
    background_rows: int = 100
    permutations: int = 128
    top_k: int = 20
    reduced_models: tuple[str, ...] = forest.LIGHT_MODELS
    n_trees: int = 100
    ablation_k: tuple[int, ...] = (5, 10, 20, 50, 100)
    ablation_model: str = "mlp"
    bands: int = DEFAULT_BANDS
    svg: bool = False

    def __post_init__(self):
        self.settings = tuple(s for s in SETTINGS if s in set(self.settings))
        self.reduced_models = tuple(self.reduced_models)
        self.ablation_k = tuple(int(k) for k in self.ablation_k)
        self.validate()

    def validate(self) -> None:
        if not self.settings:
            raise ValidationError(f"at least one setting from {SETTINGS} is required")
        if (self.synthetic is None) == (self.dataset is None):
            raise ValidationError("give exactly one of a synthetic config or a dataset path")
        if self.k_folds < 2:
            raise ValidationError("k_folds must be >= 2")
        if self.hpo_trials < 0 or self.top_k < 1 or self.permutations < 1:
            raise ValidationError("hpo_trials >= 0, top_k >= 1 and permutations >= 1 required")
        if not self.reduced_models or set(self.reduced_models) - set(forest.LIGHT_MODELS):
            raise ValidationError(f"reduced_models must be drawn from {forest.LIGHT_MODELS}")
        if self.ablation_model not in ("mlp", *forest.LIGHT_MODELS):
            raise ValidationError(f"unknown ablation model {self.ablation_model!r}")
        if any(k < 1 for k in self.ablation_k) or list(self.ablation_k) != sorted(set(self.ablation_k)):
            raise ValidationError("ablation k values must be positive and strictly ascending")

    @property
    def search_space(self) -> hpo.SearchSpace:
        return self.space if self.space is not None else hpo.default_mlp_space()

    def to_dict(self) -> dict:
        return {
            "synthetic": self.synthetic.to_dict() if self.synthetic is not None else None,
            "dataset": self.dataset,
            "settings": list(self.settings),
            "seed": self.seed,
            "split_ratio": self.split_ratio,
            "k_folds": self.k_folds,
            "params_only_model": self.params_only_model.to_dict(),
            "full_model": self.full_model.to_dict(),
            "hpo_trials": self.hpo_trials,
            "hpo_epochs": self.hpo_epochs,
            "hpo_patience": self.hpo_patience,
            "space": json.loads(self.space.to_json()) if self.space is not None else None,
            "tpe_startup": self.tpe_startup,
            "shared_arch": self.shared_arch,
            "background_rows": self.background_rows,
            "permutations": self.permutations,
            "top_k": self.top_k,
            "reduced_models": list(self.reduced_models),
            "n_trees": self.n_trees,
            "ablation_k": list(self.ablation_k),
            "ablation_model": self.ablation_model,
            "bands": self.bands,
            "svg": self.svg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Accepts a config document or a ``run_manifest.json`` (uses its ``config`` entry)."""
        d = dict(d.get("config", d))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        if "synthetic" in d:
            d["synthetic"] = SyntheticConfig.from_dict(d["synthetic"]) if d["synthetic"] else None
        for key in ("params_only_model", "full_model"):
            if key in d:
                d[key] = ModelSpec.from_dict(d[key])
        if d.get("space") is not None:
            d["space"] = hpo.SearchSpace.from_json(json.dumps(d["space"]))
        if "dataset" in d and d["dataset"] and "synthetic" not in d:
            d["synthetic"] = None
        return cls(**d)

    def fingerprint(self, *keys: str) -> str:
        doc = self.to_dict()
        doc = {k: doc[k] for k in keys} if keys else doc
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# feature table


@dataclass
class FeatureTable:
    """One row per sample: 5 parameter inputs, the sensor block and the target."""

    sample_ids: list[str]  # "<experiment_id>/<sample_id>"
    keys: list[tuple[str, int]]
    techniques: np.ndarray
    params: np.ndarray
    sensors: np.ndarray
    target: np.ndarray
    sensor_names: list[str]

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def input_names(self) -> list[str]:
        return [*PARAM_COLUMNS, *self.sensor_names]

    def inputs(self, experiment: str) -> np.ndarray:
        if experiment == "params_only":
            return self.params
        return np.hstack([self.params, self.sensors])


def _chunks(items: Iterable, size: int):
    chunk = []
    for item in items:
        chunk.append(item)
        if len(chunk) == size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def build_table(samples: Iterable[tuple[str, Sample]], bands: int = DEFAULT_BANDS,
                threads: int = 1) -> FeatureTable:
    """Extract features from ``(technique, sample)`` pairs, streaming in small chunks."""
    keys, techs, params, sensors, target = [], [], [], [], []

    def one(pair):
        return extract_sample(pair[1], bands).values

    for chunk in _chunks(samples, 32):
        for (tech, s), vec in zip(chunk, _map(one, chunk, threads)):
            keys.append((s.experiment_id, s.sample_id))
            techs.append(tech)
            params.append(parameter_row(s))
            sensors.append(vec)
            target.append(s.final_roughness)
    if not keys:
        raise ValidationError("no samples to extract")
    return FeatureTable(
        [f"{e}/{i}" for e, i in keys], keys, np.array(techs), np.array(params),
        np.array(sensors), np.array(target), feature_names(bands),
    )


def load_table(config: RunConfig, threads: int = 1) -> FeatureTable:
    if config.synthetic is not None:
        pairs = ((d.technique.value, d.sample) for d in iter_synthetic(config.synthetic))
    else:
        pairs = ((e.technique.value, s) for e in load_dataset(config.dataset) for s in e.samples)
    return build_table(pairs, config.bands, threads)


# ---------------------------------------------------------------------------
# run context


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class SettingData:
    setting: str
    train_rows: np.ndarray  # table row indices, ascending
    test_rows: np.ndarray
    folds: np.ndarray  # fold index for each training row


class RowAudit:
    """Records which table rows each stage read, for leakage checks."""

    def __init__(self):
        self._lock = threading.Lock()
        self.touched: dict[tuple[str, str], frozenset] = {}

    def record(self, stage: str, setting: str, rows) -> None:
        rows = frozenset(int(r) for r in np.asarray(rows).ravel())
        with self._lock:
            self.touched[(stage, setting)] = self.touched.get((stage, setting), frozenset()) | rows

    def summary(self, keys: Sequence[tuple[str, int]]) -> dict:
        out = {}
        for (stage, setting), rows in sorted(self.touched.items()):
            ids = "\n".join(f"{keys[r][0]}/{keys[r][1]}" for r in sorted(rows))
            out[f"{stage}/{setting}"] = {
                "rows": len(rows), "sha256": hashlib.sha256(ids.encode()).hexdigest(),
            }
        return out


@dataclass
class RunContext:
    config: RunConfig
    table: FeatureTable
    plan: pp.SplitPlan
    data: dict[str, SettingData]
    threads: int = 1
    audit: RowAudit = field(default_factory=RowAudit)

    def map(self, fn: Callable, items: Sequence) -> list:
        return _map(fn, items, self.threads)


def make_splits(table: FeatureTable, config: RunConfig) -> tuple[pp.SplitPlan, dict[str, SettingData]]:
    """Per-technique 80/20 split; the combined setting is the union of the technique splits."""
    groups: dict[str, list] = {}
    for key, tech in zip(table.keys, table.techniques):
        groups.setdefault(str(tech), []).append(key)
    plan = pp.split(groups, config.split_ratio, config.seed)
    row_of = {key: i for i, key in enumerate(table.keys)}
    train_all = np.sort([row_of[k] for k in plan.train_ids])
    test_all = np.sort([row_of[k] for k in plan.test_ids])
    data = {}
    for setting in config.settings:
        if setting == "combined":
            tr, te = train_all, test_all
        else:
            if setting not in groups:
                raise ValidationError(f"no samples for setting {setting!r}")
            tr = train_all[table.techniques[train_all] == setting]
            te = test_all[table.techniques[test_all] == setting]
        fold_plan = pp.kfold([table.keys[r] for r in tr], config.k_folds, config.seed)
        folds = np.array([fold_plan.folds[table.keys[r]] for r in tr])
        data[setting] = SettingData(setting, tr, te, folds)
    return plan, data


def prepare(config: RunConfig, table: FeatureTable | None = None, threads: int = 1) -> RunContext:
    table = table if table is not None else load_table(config, threads)
    plan, data = make_splits(table, config)
    return RunContext(config, table, plan, data, threads)


class _SettingContext:
    """Prefix errors raised while processing a setting with its name."""

    def __init__(self, setting: str):
        self.setting = setting

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if isinstance(exc, LasermonError) and exc.args and not str(exc.args[0]).startswith("["):
            exc.args = (f"[{self.setting}] {exc.args[0]}", *exc.args[1:])
        return False


# ---------------------------------------------------------------------------
# MLP fitting


@dataclass
class CvOutcome:
    val_mse: list[float]
    best_epochs: list[int]

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.val_mse))

    @property
    def refit_epochs(self) -> int:
        return max(1, int(math.floor(float(np.mean(self.best_epochs)) + 0.5)))


def cross_validate(X: np.ndarray, y: np.ndarray, folds: np.ndarray, spec: ModelSpec,
                   seed: int, threads: int = 1) -> CvOutcome:
    """Train once per fold with early stopping on the held-out fold."""
    train_cfg = replace(spec.train, seed=seed)
    init = mlp.init_model(spec.architecture(X.shape[1]), seed)

    def one(f: int):
        va = folds == f
        _, hist = mlp.train(init, X[~va], y[~va], X[va], y[va], train_cfg)
        return hist.val_mse[hist.best_epoch - 1], hist.best_epoch

    out = _map(one, range(int(folds.max()) + 1), threads)
    return CvOutcome([v for v, _ in out], [e for _, e in out])


def fit_mlp(X: np.ndarray, y: np.ndarray, folds: np.ndarray, spec: ModelSpec, seed: int,
            stats: pp.NormalizationStats, threads: int = 1) -> tuple[mlp.MlpModel, CvOutcome]:
    """k-fold CV for the epoch budget, then a refit on every training row."""
    cv = cross_validate(X, y, folds, spec, seed, threads)
    init = mlp.init_model(spec.architecture(X.shape[1]), seed, stats)
    model = mlp.fit_epochs(init, X, y, replace(spec.train, seed=seed), cv.refit_epochs)
    return model, cv


@dataclass
class SettingOutcome:
    report: MetricsReport
    sample_ids: list[str]
    y_test: np.ndarray
    p_test: np.ndarray


@dataclass
class ResultsTable:
    """Per-setting metrics for one experiment, in (a)-(f) order."""

    experiment: str
    rows: dict[str, SettingOutcome]
    specs: dict[str, ModelSpec] = field(default_factory=dict)
    studies: dict[str, hpo.Study] = field(default_factory=dict)

    def reports(self) -> list[MetricsReport]:
        return [self.rows[s].report for s in SETTINGS if s in self.rows]

    def test_r2(self, setting: str) -> float:
        return self.rows[setting].report.test_r2


def _normalized(ctx: RunContext, setting: str, X: np.ndarray, columns: Sequence[str]):
    d = ctx.data[setting]
    ctx.audit.record("normalize", setting, d.train_rows)
    stats = pp.fit_minmax(X[d.train_rows], columns)
    return stats, pp.apply_minmax(X[d.train_rows], stats), pp.apply_minmax(X[d.test_rows], stats)


def _arch_groups(settings: Sequence[str], shared: bool) -> list[tuple[str, ...]]:
    individual = tuple(s for s in settings if s != "combined")
    if shared:
        return [tuple(settings)]
    groups = [individual] if individual else []
    return groups + ([("combined",)] if "combined" in settings else [])


def _study_settings(group: tuple[str, ...]) -> tuple[str, ...]:
    # a shared-architecture study tunes on the individual settings only
    individual = tuple(s for s in group if s != "combined")
    return individual or group


def tune(ctx: RunContext, experiment: str, base: ModelSpec) -> tuple[dict[str, ModelSpec], dict[str, hpo.Study]]:
    """Pick an MLP spec per setting; one TPE study per architecture group."""
    cfg = ctx.config
    if cfg.hpo_trials == 0:
        return {s: base for s in cfg.settings}, {}
    X = ctx.table.inputs(experiment)
    y = ctx.table.target
    specs, studies = {}, {}
    for group in _arch_groups(cfg.settings, cfg.shared_arch):
        tuned = _study_settings(group)
        prepared = {}
        for s in tuned:
            _, Xtr, _ = _normalized(ctx, s, X, ())
            d = ctx.data[s]
            ctx.audit.record("hpo", s, d.train_rows)
            prepared[s] = (Xtr, y[d.train_rows], d.folds)

        def objective(params: dict) -> float:
            spec = base.with_params(params)
            spec = replace(spec, train=replace(spec.train, max_epochs=cfg.hpo_epochs,
                                               early_stopping_patience=cfg.hpo_patience))
            scores = []
            for s in tuned:
                Xtr, ytr, folds = prepared[s]
                cv = cross_validate(Xtr, ytr, folds, spec, cfg.seed, ctx.threads)
                scores.append(cv.mean_mse if len(tuned) == 1 else cv.mean_mse / float(np.var(ytr)))
            return float(np.mean(scores))

        tpe = hpo.TpeConfig(n_startup=cfg.tpe_startup, seed=cfg.seed)
        best, trials = hpo.run_study(objective, cfg.search_space, cfg.hpo_trials, tpe)
        name = "shared" if cfg.shared_arch else ("combined" if group == ("combined",) else "individual")
        studies[name] = hpo.Study(best, trials)
        for s in group:
            specs[s] = base.with_params(best.params)
    return specs, studies


def _run_mlp_experiment(ctx: RunContext, experiment: str, base: ModelSpec):
    X = ctx.table.inputs(experiment)
    y = ctx.table.target
    columns = ctx.table.input_names[: X.shape[1]]
    specs, studies = tune(ctx, experiment, base)

    def one(setting: str):
        with _SettingContext(setting):
            d = ctx.data[setting]
            stats, Xtr, Xte = _normalized(ctx, setting, X, columns)
            model, _ = fit_mlp(Xtr, y[d.train_rows], d.folds, specs[setting], ctx.config.seed,
                               stats, ctx.threads)
            p_tr, p_te = mlp.predict(model, Xtr), mlp.predict(model, Xte)
            report = MetricsReport.evaluate(setting, y[d.train_rows], p_tr, y[d.test_rows], p_te)
            ids = [ctx.table.sample_ids[r] for r in d.test_rows]
            return model, SettingOutcome(report, ids, y[d.test_rows], p_te)

    results = dict(zip(ctx.config.settings, ctx.map(one, ctx.config.settings)))
    table = ResultsTable(experiment, {s: r[1] for s, r in results.items()}, specs, studies)
    return table, {s: r[0] for s, r in results.items()}


def run_params_only(config: RunConfig, context: RunContext | None = None) -> ResultsTable:
    """Baseline on the 5 non-sensor inputs."""
    ctx = context or prepare(config)
    return _run_mlp_experiment(ctx, "params_only", config.params_only_model)[0]


def run_full(config: RunConfig, context: RunContext | None = None) -> tuple[ResultsTable, dict[str, mlp.MlpModel]]:
    """Parameters plus the full sensor block (1561 inputs for the default catalog)."""
    ctx = context or prepare(config)
    return _run_mlp_experiment(ctx, "params_plus_sensors", config.full_model)


# ---------------------------------------------------------------------------
# reduced-feature models


@dataclass
class ReducedSetting:
    importance: attr.GlobalImportance  # over the sensor block
    phi: np.ndarray  # explained rows x sensor features
    top: np.ndarray  # sensor indices, ranking order
    candidates: dict[str, MetricsReport]
    cv_mse: dict[str, float]
    selected: str
    models: dict[str, forest.Ensemble]


def sensor_attribution(ctx: RunContext, setting: str, model: mlp.MlpModel):
    """Shapley values of the full model on the setting's test rows."""
    d = ctx.data[setting]
    cfg = ctx.config
    X = model.transform(ctx.table.inputs("params_plus_sensors"))
    ctx.audit.record("background", setting, d.train_rows)
    background = attr.make_background(X[d.train_rows], cfg.background_rows, cfg.seed)
    result = attr.explain(
        mlp.attribution_predictor(model), X[d.test_rows], background,
        attr.AttributionConfig(cfg.background_rows, "sampled", cfg.permutations, cfg.seed),
    )
    phi = result.phi[:, N_PARAMS:]
    return attr.global_importance(phi), phi


def reduced_columns(top: np.ndarray) -> np.ndarray:
    """Input columns for a top-k sensor selection, in catalog order."""
    return np.concatenate([np.arange(N_PARAMS), N_PARAMS + np.sort(top)])


def _fit_light(kind: str, X: np.ndarray, y: np.ndarray, cfg: RunConfig, threads: int):
    return forest.fit_model(kind, X, y, cfg.n_trees, cfg.seed, threads)


def _cv_light(kind: str, X: np.ndarray, y: np.ndarray, folds: np.ndarray, cfg: RunConfig) -> float:
    errs = []
    for f in range(int(folds.max()) + 1):
        va = folds == f
        model = _fit_light(kind, X[~va], y[~va], cfg, 1)
        errs.append(mse(y[va], forest.predict(model, X[va])))
    return float(np.mean(errs))


def run_reduced(config: RunConfig, full_models: Mapping[str, mlp.MlpModel],
                context: RunContext | None = None) -> tuple[ResultsTable, dict[str, ReducedSetting]]:
    """Top-k Shapley sensor features plus the 5 parameter inputs, fitted with DT/RF/ET.

    The reported model per setting is the one with the lowest k-fold CV MSE.
    """
    ctx = context or prepare(config)
    X = ctx.table.inputs("params_plus_sensors")
    y = ctx.table.target

    def one(setting: str):
        with _SettingContext(setting):
            if setting not in full_models:
                raise ValidationError("no full model available")
            d = ctx.data[setting]
            importance, phi = sensor_attribution(ctx, setting, full_models[setting])
            top = attr.select_top_k(importance, min(config.top_k, X.shape[1] - N_PARAMS))
            cols = reduced_columns(top)
            stats, Xtr, Xte = _normalized(ctx, setting, X[:, cols], ())
            ytr, yte = y[d.train_rows], y[d.test_rows]
            cv, reports, models = {}, {}, {}
            for kind in config.reduced_models:
                cv[kind] = _cv_light(kind, Xtr, ytr, d.folds, config)
                models[kind] = _fit_light(kind, Xtr, ytr, config, 1)
                reports[kind] = MetricsReport.evaluate(
                    setting, ytr, forest.predict(models[kind], Xtr),
                    yte, forest.predict(models[kind], Xte), model=kind,
                )
            selected = min(config.reduced_models, key=lambda k: (cv[k], config.reduced_models.index(k)))
            ids = [ctx.table.sample_ids[r] for r in d.test_rows]
            outcome = SettingOutcome(reports[selected], ids, yte, forest.predict(models[selected], Xte))
            return outcome, ReducedSetting(importance, phi, top, reports, cv, selected, models)

    results = dict(zip(config.settings, ctx.map(one, config.settings)))
    table = ResultsTable("reduced", {s: r[0] for s, r in results.items()})
    return table, {s: r[1] for s, r in results.items()}


def retrain_subset(ctx: RunContext, setting: str, cols: np.ndarray, kind: str,
                   spec: ModelSpec) -> MetricsReport:
    """Refit the ablation model on a column subset of the full input matrix."""
    d = ctx.data[setting]
    X = ctx.table.inputs("params_plus_sensors")[:, cols]
    y = ctx.table.target
    names = [ctx.table.input_names[c] for c in cols]
    stats, Xtr, Xte = _normalized(ctx, setting, X, names)
    ytr, yte = y[d.train_rows], y[d.test_rows]
    if kind == "mlp":
        model, _ = fit_mlp(Xtr, ytr, d.folds, spec, ctx.config.seed, stats, 1)
        p_tr, p_te = mlp.predict(model, Xtr), mlp.predict(model, Xte)
    else:
        model = _fit_light(kind, Xtr, ytr, ctx.config, 1)
        p_tr, p_te = forest.predict(model, Xtr), forest.predict(model, Xte)
    return MetricsReport.evaluate(setting, ytr, p_tr, yte, p_te, model=kind)


def run_ablation(config: RunConfig, full: ResultsTable, reduced: Mapping[str, ReducedSetting],
                 context: RunContext | None = None, k_values: Sequence[int] | None = None):
    """Test metrics against the number of retained sensor features, plus the full-width point."""
    ctx = context or prepare(config)
    n_sensor = ctx.table.sensors.shape[1]
    ks = [k for k in (k_values if k_values is not None else config.ablation_k) if k <= n_sensor]
    kind = config.ablation_model

    def retrain(k: int) -> dict[str, tuple[float, float]]:
        def one(setting: str):
            if k == n_sensor and kind == "mlp":
                # selection is the identity, so this is exactly the full model
                rep = full.rows[setting].report
            else:
                cols = reduced_columns(reduced[setting].importance.ranking[:k])
                rep = retrain_subset(ctx, setting, cols, kind, full.specs.get(setting, config.full_model))
            return rep.test_r2, rep.test_rmse

        return dict(zip(config.settings, ctx.map(one, config.settings)))

    return attr.ablation_sweep(ks, retrain, n_sensor)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class RunOutputs:
    config: RunConfig
    tables: dict[str, ResultsTable] = field(default_factory=dict)
    full_models: dict[str, mlp.MlpModel] = field(default_factory=dict)
    reduced: dict[str, ReducedSetting] = field(default_factory=dict)
    ablation: list[attr.AblationPoint] = field(default_factory=list)
    context: RunContext | None = None


def run_experiments(config: RunConfig, experiments: Sequence[str] = EXPERIMENTS,
                    threads: int = 1, ablation: bool = False,
                    context: RunContext | None = None,
                    full_run: tuple[dict, dict] | None = None) -> RunOutputs:
    """Run the requested experiments.

    ``full_run`` is ``(models, specs)`` from :func:`load_full_run`; without it
    the reduced experiment and the ablation train the full models inline.
    """
    unknown = set(experiments) - set(EXPERIMENTS)
    if unknown:
        raise ValidationError(f"unknown experiments {sorted(unknown)}")
    ctx = context or prepare(config, threads=threads)
    out = RunOutputs(config, context=ctx)
    if "params_only" in experiments:
        out.tables["params_only"] = run_params_only(config, ctx)
    need_full = "params_plus_sensors" in experiments or (
        ("reduced" in experiments or ablation) and full_run is None
    )
    full_specs: dict = {}
    if need_full:
        table, out.full_models = run_full(config, ctx)
        out.tables["params_plus_sensors"] = table
    elif full_run is not None:
        out.full_models, full_specs = dict(full_run[0]), dict(full_run[1])
    if "reduced" in experiments or ablation:
        out.tables["reduced"], out.reduced = run_reduced(config, out.full_models, ctx)
    if ablation:
        full_table = out.tables.get("params_plus_sensors")
        if full_table is None:
            full_table = _score_models(ctx, out.full_models, full_specs, config)
        out.ablation = run_ablation(config, full_table, out.reduced, ctx)
    return out


def _score_models(ctx: RunContext, models: Mapping[str, mlp.MlpModel],
                  specs: Mapping[str, ModelSpec], config: RunConfig) -> ResultsTable:
    X = ctx.table.inputs("params_plus_sensors")
    y = ctx.table.target
    rows = {}
    for s in config.settings:
        d = ctx.data[s]
        m = models[s]
        p_tr = mlp.predict(m, m.transform(X[d.train_rows]))
        p_te = mlp.predict(m, m.transform(X[d.test_rows]))
        rows[s] = SettingOutcome(
            MetricsReport.evaluate(s, y[d.train_rows], p_tr, y[d.test_rows], p_te),
            [ctx.table.sample_ids[r] for r in d.test_rows], y[d.test_rows], p_te,
        )
    return ResultsTable("params_plus_sensors", rows, dict(specs))


# ---------------------------------------------------------------------------
# reports


def _g(x: float) -> str:
    return format(float(x), ".17g")


TABLE_COLUMNS = ("Train R2", "Test R2", "Train RMSE", "Test RMSE")


def write_table_csv(path: Path, table: ResultsTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "setting", "model", *TABLE_COLUMNS, "n_train", "n_test"])
        for r in table.reports():
            w.writerow([LABELS[r.setting], r.setting, r.model, _g(r.train_r2), _g(r.test_r2),
                        _g(r.train_rmse), _g(r.test_rmse), r.n_train, r.n_test])


def table_markdown(table: ResultsTable) -> str:
    lines = [
        f"| Setting | {' | '.join(TABLE_COLUMNS)} | Model |",
        "|---|" + "---:|" * len(TABLE_COLUMNS) + "---|",
    ]
    for r in table.reports():
        vals = " | ".join(f"{v:.4f}" for v in (r.train_r2, r.test_r2, r.train_rmse, r.test_rmse))
        lines.append(f"| {DISPLAY[r.setting]} ({LABELS[r.setting]}) | {vals} | {r.model.upper()} |")
    return "\n".join(lines) + "\n"


def write_scatter_csv(path: Path, outcome: SettingOutcome) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "ground_truth", "prediction"])
        for sid, t, p in zip(outcome.sample_ids, outcome.y_test, outcome.p_test):
            w.writerow([sid, _g(t), _g(p)])


def scatter_svg(csv_path: Path, title: str = "", size: int = 360) -> str:
    """Prediction-vs-truth scatter with the identity diagonal, as SVG text."""
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    t = np.array([float(r["ground_truth"]) for r in rows])
    p = np.array([float(r["prediction"]) for r in rows])
    lo = float(min(t.min(), p.min())) if len(t) else 0.0
    hi = float(max(t.max(), p.max())) if len(t) else 1.0
    hi = hi if hi > lo else lo + 1.0
    pad = 40

    def sx(v):
        return pad + (v - lo) / (hi - lo) * (size - 2 * pad)

    def sy(v):
        return size - pad - (v - lo) / (hi - lo) * (size - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" y2="{sy(hi):.2f}" '
        'stroke="gray" stroke-dasharray="4"/>',
        f'<text x="{size / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="11">ground truth</text>',
        f'<text x="12" y="{size / 2}" font-size="11" transform="rotate(-90 12 {size / 2})" '
        'text-anchor="middle">prediction</text>',
    ]
    parts += [f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="steelblue"/>'
              for a, b in zip(t, p)]
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _versions() -> dict:
    return {
        "lasermon": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "kernel_backend": _kernels.BACKEND,
    }


def emit_reports(outputs: RunOutputs, out_dir: str | Path) -> list[Path]:
    """Write tables, scatter data, importance/ablation CSVs and the run manifest.

    Returns the written paths, sorted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = outputs.config
    written: list[Path] = []

    def put_text(path: Path, text: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        written.append(path)

    for name, table in outputs.tables.items():
        write_table_csv(out / f"table_{name}.csv", table)
        written.append(out / f"table_{name}.csv")
        put_text(out / f"table_{name}.md", table_markdown(table))
        sub = out / name
        sub.mkdir(exist_ok=True)
        for setting, outcome in table.rows.items():
            path = sub / f"scatter_{setting}.csv"
            write_scatter_csv(path, outcome)
            written.append(path)
            if cfg.svg:
                put_text(sub / f"scatter_{setting}.svg",
                         scatter_svg(path, f"{DISPLAY[setting]} ({LABELS[setting]})"))
        for group, study in table.studies.items():
            (out / "hpo").mkdir(exist_ok=True)
            log, best = out / "hpo" / f"{name}_{group}.jsonl", out / "hpo" / f"{name}_{group}_best.json"
            study.write(log, best)
            written += [log, best]

    if outputs.full_models:
        (out / "models").mkdir(exist_ok=True)
        for setting, model in outputs.full_models.items():
            path = out / "models" / f"params_plus_sensors_{setting}.json"
            mlp.save_model(model, path)
            written.append(path)
        put_text(out / "models" / "fingerprint.txt", full_model_fingerprint(cfg) + "\n")
        full = outputs.tables.get("params_plus_sensors")
        if full is not None and full.specs:
            put_text(out / "models" / "specs.json", json.dumps(
                {s: spec.to_dict() for s, spec in full.specs.items()}, indent=1, sort_keys=True))

    if outputs.reduced:
        names = outputs.context.table.sensor_names if outputs.context else feature_names(cfg.bands)
        for setting, red in outputs.reduced.items():
            path = out / "reduced" / f"importance_{setting}.csv"
            path.parent.mkdir(exist_ok=True)
            attr.write_importance_csv(path, red.importance, names)
            written.append(path)
            phi_path = out / "reduced" / f"phi_{setting}.csv"
            ctx = outputs.context
            values = ctx.table.sensors[ctx.data[setting].test_rows] if ctx else np.zeros_like(red.phi)
            attr.write_phi_summary_csv(phi_path, red.phi, values, names, red.top)
            written.append(phi_path)
        write_candidates_csv(out / "table_reduced_models.csv", outputs.reduced)
        written.append(out / "table_reduced_models.csv")
        primary = "combined" if "combined" in outputs.reduced else next(iter(outputs.reduced))
        attr.write_importance_csv(out / "importance.csv", outputs.reduced[primary].importance, names)
        written.append(out / "importance.csv")

    if outputs.ablation:
        attr.write_ablation_csv(out / "ablation.csv", outputs.ablation)
        written.append(out / "ablation.csv")

    if outputs.context is not None:
        pp.save_plan(out / "split.json", outputs.context.plan)
        written.append(out / "split.json")
        put_text(out / "row_audit.json", json.dumps(
            outputs.context.audit.summary(outputs.context.table.keys), indent=1, sort_keys=True))

    put_text(out / "results.json", json.dumps(results_document(outputs), indent=1, sort_keys=True))
    manifest = {
        "config": cfg.to_dict(),
        "experiments": list(outputs.tables),
        "ablation": bool(outputs.ablation),
        "seeds": {"run": cfg.seed,
                  "synthetic": cfg.synthetic.seed if cfg.synthetic is not None else None},
        "versions": _versions(),
    }
    put_text(out / "run_manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return sorted(written)


def write_candidates_csv(path: Path, reduced: Mapping[str, ReducedSetting]) -> None:
    """Every reduced-input model per setting, with its CV score and selection flag."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "setting", "model", *TABLE_COLUMNS, "cv_mse", "selected"])
        for setting in SETTINGS:
            if setting not in reduced:
                continue
            red = reduced[setting]
            for kind, r in red.candidates.items():
                w.writerow([LABELS[setting], setting, kind, _g(r.train_r2), _g(r.test_r2),
                            _g(r.train_rmse), _g(r.test_rmse), _g(red.cv_mse[kind]),
                            int(kind == red.selected)])


def results_document(outputs: RunOutputs) -> dict:
    doc = {"tables": {}, "reduced": {}, "ablation": [asdict(p) for p in outputs.ablation]}
    for name, table in outputs.tables.items():
        doc["tables"][name] = {
            "rows": [r.to_dict() for r in table.reports()],
            "specs": {s: spec.to_dict() for s, spec in table.specs.items()},
        }
    names = outputs.context.table.sensor_names if outputs.context else None
    for setting, red in outputs.reduced.items():
        doc["reduced"][setting] = {
            "selected": red.selected,
            "top": [names[i] if names else int(i) for i in red.top],
            "candidates": {k: r.to_dict() for k, r in red.candidates.items()},
        }
    return doc


def tables_from_results(doc: dict) -> dict[str, list[MetricsReport]]:
    return {
        name: [MetricsReport(**r) for r in t["rows"]]
        for name, t in doc["tables"].items()
    }


def full_model_fingerprint(config: RunConfig) -> str:
    """Hash of the config fields that determine the full models."""
    return config.fingerprint(
        "synthetic", "dataset", "settings", "seed", "split_ratio", "k_folds", "full_model",
        "hpo_trials", "hpo_epochs", "hpo_patience", "space", "tpe_startup", "shared_arch", "bands",
    )


def load_full_run(out_dir: str | Path, config: RunConfig) -> tuple[dict, dict] | None:
    """``(models, specs)`` saved by an earlier run with a matching config, else ``None``."""
    root = Path(out_dir) / "models"
    fp = root / "fingerprint.txt"
    if not fp.is_file() or fp.read_text(encoding="utf-8").strip() != full_model_fingerprint(config):
        return None
    paths = {s: root / f"params_plus_sensors_{s}.json" for s in config.settings}
    if not all(p.is_file() for p in paths.values()):
        return None
    specs_path = root / "specs.json"
    specs = {}
    if specs_path.is_file():
        specs = {s: ModelSpec.from_dict(d)
                 for s, d in json.loads(specs_path.read_text(encoding="utf-8")).items()}
    return {s: mlp.load_model(p) for s, p in paths.items()}, specs
