"""Experiment / sample / sensor data model, on-disk I/O and the synthetic generator.

A dataset is a list of :class:`Experiment`. Each experiment is one workpiece
prepared with one preprocessing technique and holds a number of samples
(sub-experiments) with their own laser parameters, roughness values and
per-layer photodiode traces.

The synthetic generator plants a latent quality scalar ``q`` per sample that
reaches the final roughness only through the amplitude of a sinusoid in the
IR channel, so sensor features carry information the laser parameters do not.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, ValidationError

CHANNELS = ("ir", "acoustic", "reflection", "visible")
MIN_TRACE_LENGTH = 8

SAMPLES_HEADER = [
    "sample_id",
    "pulses_per_burst",
    "pulse_fluence",
    "laser_power",
    "num_layers",
    "initial_roughness",
    "final_roughness",
]
SENSORS_HEADER = ["layer", "t", *CHANNELS]


class PreprocessingTechnique(str, enum.Enum):
    MILLING = "milling"
    GRINDING = "grinding"
    POLISHING = "polishing"
    DIE_EDM = "die_edm"
    WIRE_EDM = "wire_edm"


TECHNIQUES = tuple(PreprocessingTechnique)


@dataclass(frozen=True)
class LaserParameters:
    pulses_per_burst: int
    pulse_fluence: float  # J/cm^2
    laser_power: float  # W
    num_layers: int

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (
            float(self.pulses_per_burst),
            self.pulse_fluence,
            self.laser_power,
            float(self.num_layers),
        )


@dataclass(frozen=True)
class LayerRecording:
    layer_index: int
    ir: np.ndarray
    acoustic: np.ndarray
    reflection: np.ndarray
    visible: np.ndarray
    sample_rate: float

    def channel(self, name: str) -> np.ndarray:
        return getattr(self, name)

    @property
    def trace_length(self) -> int:
        return len(self.ir)


@dataclass(frozen=True)
class Sample:
    experiment_id: str
    sample_id: int
    params: LaserParameters
    initial_roughness: float  # um
    final_roughness: float  # um, regression target
    layers: tuple[LayerRecording, ...]


@dataclass(frozen=True)
class Experiment:
    id: str
    technique: PreprocessingTechnique
    samples: tuple[Sample, ...]


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the planted generative model.

    The coefficient defaults are toolkit choices, not measured values.
    """

    seed: int = 42
    experiments_per_technique: int = 2
    samples_per_experiment: int = 99
    trace_length: int = 1024
    sample_rate: float = 100_000.0
    noise_scale: float = 0.05
    energy_coef: float = 0.8
    amplitude_coef: float = 1.5
    base_amplitude: float = 1.0
    baseline_roughness: dict = field(
        default_factory=lambda: {
            "milling": 12.0,
            "grinding": 6.0,
            "polishing": 0.8,
            "die_edm": 4.0,
            "wire_edm": 2.0,
        }
    )
    min_layers: int = 8
    max_layers: int = 64

    def validate(self) -> None:
        if self.experiments_per_technique < 1 or self.samples_per_experiment < 1:
            raise ValidationError("experiment and sample counts must be positive")
        if self.trace_length < MIN_TRACE_LENGTH:
            raise ValidationError(f"trace_length must be >= {MIN_TRACE_LENGTH}")
        if not self.sample_rate > 0:
            raise ValidationError("sample_rate must be positive")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be non-negative")
        if not 1 <= self.min_layers <= self.max_layers:
            raise ValidationError("invalid layer range")
        missing = {t.value for t in TECHNIQUES} - set(self.baseline_roughness)
        if missing:
            raise ValidationError(f"baseline roughness missing for {sorted(missing)}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "experiments_per_technique": self.experiments_per_technique,
            "samples_per_experiment": self.samples_per_experiment,
            "trace_length": self.trace_length,
            "sample_rate": self.sample_rate,
            "noise_scale": self.noise_scale,
            "energy_coef": self.energy_coef,
            "amplitude_coef": self.amplitude_coef,
            "base_amplitude": self.base_amplitude,
            "baseline_roughness": dict(self.baseline_roughness),
            "min_layers": self.min_layers,
            "max_layers": self.max_layers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        return cls(**data)


# ---------------------------------------------------------------------------
# validation


def _fail(where: str, message: str) -> ValidationError:
    return ValidationError(f"{where}: {message}")


def validate_sample(sample: Sample, experiment_id: str | None = None) -> None:
    where = f"experiment {sample.experiment_id!r} sample {sample.sample_id}"
    if experiment_id is not None and sample.experiment_id != experiment_id:
        raise _fail(where, f"belongs to experiment {experiment_id!r}")
    p = sample.params
    if p.pulses_per_burst < 1 or p.num_layers < 1:
        raise _fail(where, "pulses_per_burst and num_layers must be positive")
    for name in ("pulse_fluence", "laser_power"):
        value = getattr(p, name)
        if not (math.isfinite(value) and value > 0):
            raise _fail(where, f"{name} must be finite and positive, got {value}")
    for name in ("initial_roughness", "final_roughness"):
        value = getattr(sample, name)
        if not (math.isfinite(value) and value >= 0):
            raise _fail(where, f"{name} must be finite and >= 0, got {value}")
    if len(sample.layers) != p.num_layers:
        raise _fail(where, f"{len(sample.layers)} layers recorded, num_layers={p.num_layers}")
    for expected, layer in enumerate(sample.layers):
        lw = f"{where} layer {layer.layer_index}"
        if layer.layer_index != expected:
            raise _fail(lw, f"layer indices not contiguous (expected {expected})")
        if not layer.sample_rate > 0:
            raise _fail(lw, "sample_rate must be positive")
        lengths = {c: len(layer.channel(c)) for c in CHANNELS}
        if len(set(lengths.values())) != 1:
            raise _fail(lw, f"channel length mismatch {lengths}")
        if lengths["ir"] < MIN_TRACE_LENGTH:
            raise _fail(lw, f"traces shorter than {MIN_TRACE_LENGTH}")
        for c in CHANNELS:
            if not np.all(np.isfinite(layer.channel(c))):
                raise _fail(lw, f"non-finite value in channel {c}")


def validate_experiment(experiment: Experiment) -> None:
    seen = set()
    for sample in experiment.samples:
        if sample.sample_id in seen:
            raise ValidationError(
                f"experiment {experiment.id!r}: duplicate sample_id {sample.sample_id}"
            )
        seen.add(sample.sample_id)
        validate_sample(sample, experiment.id)


def last_layer(sample: Sample) -> LayerRecording:
    if not sample.layers:
        raise ValidationError(
            f"experiment {sample.experiment_id!r} sample {sample.sample_id} has no layers"
        )
    layer = sample.layers[-1]
    if layer.layer_index != sample.params.num_layers - 1:
        raise ValidationError(
            f"last layer index {layer.layer_index} != num_layers - 1 "
            f"({sample.params.num_layers - 1})"
        )
    return layer


# ---------------------------------------------------------------------------
# synthetic generation

_PARAM_STREAM = 1
_SAMPLE_STREAM = 2
_U64 = (1 << 64) - 1


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & _U64, *keys])))


@dataclass(frozen=True)
class SyntheticDraw:
    """One generated sample together with the hidden quantities behind it."""

    technique: PreprocessingTechnique
    sample: Sample
    quality: float
    amplitude: float
    energy: float


def experiment_ids(config: SyntheticConfig) -> list[tuple[PreprocessingTechnique, str]]:
    return [
        (tech, f"{tech.value}_{e:02d}")
        for tech in TECHNIQUES
        for e in range(config.experiments_per_technique)
    ]


def _draw_params(config: SyntheticConfig, sample_index: int) -> LaserParameters:
    # one parameter set per sample_id, shared by every experiment
    rng = _stream(config.seed, _PARAM_STREAM, sample_index)
    return LaserParameters(
        pulses_per_burst=int(rng.choice([1, 2, 4, 8])),
        pulse_fluence=float(rng.uniform(0.5, 5.0)),
        laser_power=float(rng.uniform(5.0, 50.0)),
        num_layers=int(rng.integers(config.min_layers, config.max_layers + 1)),
    )


def _acoustic_bursts(pulses: int, n: int) -> np.ndarray:
    t = np.arange(n, dtype=float)
    period = n / pulses
    tau = period / 8.0
    offset = t - np.floor(t / period) * period
    return np.exp(-offset / tau)


def _draw_sample(
    config: SyntheticConfig,
    technique: PreprocessingTechnique,
    experiment_id: str,
    experiment_index: int,
    sample_index: int,
) -> SyntheticDraw:
    params = _draw_params(config, sample_index)
    rng = _stream(config.seed, _SAMPLE_STREAM, experiment_index, sample_index)
    base = float(config.baseline_roughness[technique.value])

    initial = max(0.05, base * (1.0 + 0.2 * rng.uniform(-1.0, 1.0)))
    quality = float(rng.normal())
    energy = params.pulse_fluence * params.laser_power / params.num_layers
    amplitude = max(0.0, config.base_amplitude * (1.0 + 0.5 * quality))
    noise = float(rng.normal(0.0, config.noise_scale * base)) if config.noise_scale > 0 else 0.0
    final = (
        0.4 * initial
        + config.energy_coef * energy**0.6
        + config.amplitude_coef * amplitude
        + noise
    )
    final = max(0.01, final)

    n, fs = config.trace_length, config.sample_rate
    t = np.arange(n, dtype=float)
    f0 = fs / 16.0
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ir = amplitude * np.sin(2.0 * np.pi * f0 * t / fs + phase) + 0.2 * energy * rng.normal(size=n)
    acoustic = _acoustic_bursts(params.pulses_per_burst, n) + rng.normal(0.0, 0.05, size=n)
    reflection = 0.1 * params.pulse_fluence + rng.normal(0.0, 0.05, size=n)
    visible = rng.normal(0.0, 0.1, size=n) + 0.05 * t / n

    num_layers = params.num_layers
    final_channels = (ir, acoustic, reflection, visible)
    layers = []
    for i in range(num_layers - 1):
        k = i / num_layers
        layers.append(LayerRecording(i, *(k * c for c in final_channels), sample_rate=fs))
    layers.append(LayerRecording(num_layers - 1, *final_channels, sample_rate=fs))

    sample = Sample(
        experiment_id=experiment_id,
        sample_id=sample_index,
        params=params,
        initial_roughness=float(initial),
        final_roughness=float(final),
        layers=tuple(layers),
    )
    return SyntheticDraw(technique, sample, quality, amplitude, energy)


def iter_synthetic(config: SyntheticConfig) -> Iterator[SyntheticDraw]:
    """Yield generated samples one at a time, experiment-major.

    Every sample draws from its own stream keyed on (seed, experiment index,
    sample index), so the output does not depend on iteration order.
    """
    config.validate()
    for exp_index, (tech, exp_id) in enumerate(experiment_ids(config)):
        for s in range(config.samples_per_experiment):
            yield _draw_sample(config, tech, exp_id, exp_index, s)


def generate_synthetic(config: SyntheticConfig) -> list[Experiment]:
    grouped: dict[str, list[Sample]] = {}
    for draw in iter_synthetic(config):
        grouped.setdefault(draw.sample.experiment_id, []).append(draw.sample)
    return [
        Experiment(exp_id, tech, tuple(grouped.get(exp_id, ())))
        for tech, exp_id in experiment_ids(config)
    ]


# ---------------------------------------------------------------------------
# on-disk layout


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_dataset(experiments: Sequence[Experiment], root: str | Path) -> None:
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        manifest = [
            {"experiment_id": e.id, "technique": e.technique.value, "num_samples": len(e.samples)}
            for e in experiments
        ]
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        for exp in experiments:
            exp_dir = root / exp.id
            sensor_dir = exp_dir / "sensors"
            sensor_dir.mkdir(parents=True, exist_ok=True)
            with open(exp_dir / "samples.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(SAMPLES_HEADER)
                for s in exp.samples:
                    p = s.params
                    w.writerow([
                        s.sample_id, p.pulses_per_burst, _fmt(p.pulse_fluence),
                        _fmt(p.laser_power), p.num_layers,
                        _fmt(s.initial_roughness), _fmt(s.final_roughness),
                    ])
            for s in exp.samples:
                _write_sensors(s, sensor_dir)
    except OSError as exc:
        raise OSError(f"failed writing dataset under {root}: {exc}") from exc


def _write_sensors(sample: Sample, sensor_dir: Path) -> None:
    lengths = {layer.trace_length for layer in sample.layers}
    rate = sample.layers[0].sample_rate if sample.layers else 0.0
    with open(sensor_dir / f"{sample.sample_id}.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(SENSORS_HEADER) + "\n")
        lines = []
        for layer in sample.layers:
            chans = [layer.channel(c) for c in CHANNELS]
            for t in range(layer.trace_length):
                vals = ",".join(_fmt(ch[t]) for ch in chans)
                lines.append(f"{layer.layer_index},{t},{vals}\n")
        fh.writelines(lines)
    meta = {"sample_rate": rate, "trace_length": max(lengths) if lengths else 0}
    (sensor_dir / f"{sample.sample_id}.meta.json").write_text(json.dumps(meta), encoding="utf-8")


def load_dataset(root: str | Path) -> list[Experiment]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed manifest {manifest_path}: {exc}") from exc
    if not isinstance(manifest, list):
        raise FormatError(f"manifest {manifest_path} must be a JSON list")

    experiments = []
    for entry in manifest:
        try:
            exp_id = str(entry["experiment_id"])
            technique = PreprocessingTechnique(entry["technique"])
            num_samples = int(entry["num_samples"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad manifest entry {entry!r}: {exc}") from exc
        samples = _load_experiment(root / exp_id, exp_id)
        if len(samples) != num_samples:
            raise FormatError(
                f"experiment {exp_id!r}: manifest says {num_samples} samples, found {len(samples)}"
            )
        exp = Experiment(exp_id, technique, tuple(samples))
        validate_experiment(exp)
        experiments.append(exp)
    return experiments


def _load_experiment(exp_dir: Path, exp_id: str) -> list[Sample]:
    samples_path = exp_dir / "samples.csv"
    if not samples_path.is_file():
        raise FormatError(f"missing {samples_path}")
    samples = []
    with open(samples_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SAMPLES_HEADER:
            raise FormatError(f"{samples_path}: unexpected header {header}")
        for row in reader:
            if not row:
                continue
            try:
                sid = int(row[0])
                params = LaserParameters(int(row[1]), float(row[2]), float(row[3]), int(row[4]))
                initial, final = float(row[5]), float(row[6])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{samples_path}: bad row {row}: {exc}") from exc
            layers = _load_sensors(exp_dir / "sensors", exp_id, sid)
            samples.append(Sample(exp_id, sid, params, initial, final, layers))
    return samples


def _load_sensors(sensor_dir: Path, exp_id: str, sample_id: int) -> tuple[LayerRecording, ...]:
    where = f"experiment {exp_id!r} sample {sample_id}"
    meta_path = sensor_dir / f"{sample_id}.meta.json"
    csv_path = sensor_dir / f"{sample_id}.csv"
    if not meta_path.is_file() or not csv_path.is_file():
        raise FormatError(f"{where}: missing sensor files in {sensor_dir}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    rate = float(meta["sample_rate"])

    per_layer: dict[int, dict[str, list[float]]] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SENSORS_HEADER:
            raise FormatError(f"{csv_path}: unexpected header {header}")
        for row in reader:
            if not row:
                continue
            layer = int(row[0])
            chans = per_layer.setdefault(layer, {c: [] for c in CHANNELS})
            for c, raw in zip(CHANNELS, row[2:]):
                if raw.strip() == "":
                    continue
                chans[c].append(float(raw))

    layers = []
    for idx in sorted(per_layer):
        chans = per_layer[idx]
        lengths = {c: len(v) for c, v in chans.items()}
        if len(set(lengths.values())) != 1:
            raise ValidationError(f"{where} layer {idx}: channel length mismatch {lengths}")
        arrays = {c: np.asarray(v, dtype=float) for c, v in chans.items()}
        for c, arr in arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{where} layer {idx}: non-finite value in channel {c}")
        layers.append(LayerRecording(idx, **arrays, sample_rate=rate))
    return tuple(layers)
