"""Temporal, statistical and spectral features of photodiode traces.

Per channel the catalog holds 14 temporal, 40 statistical and
``15 + 2 * bands`` spectral features (335 with the default 160 bands), so a
sample maps to 4 x 389 = 1556 values. Every ratio-form feature is defined as
0 when its denominator vanishes, which keeps feature vectors finite for
constant and all-zero traces.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import CHANNELS, Sample, last_layer
from .errors import ValidationError

DEFAULT_BANDS = 160

TEMPORAL_NAMES = (
    "absolute_energy",
    "area_under_curve",
    "autocorrelation_lag1",
    "centroid",
    "mean_abs_diff",
    "mean_diff",
    "median_abs_diff",
    "median_diff",
    "negative_turning_points",
    "positive_turning_points",
    "peak_to_peak",
    "slope",
    "sum_abs_diff",
    "zero_crossing_rate",
)

HIST_BINS = 10
QUANTILE_LEVELS = tuple(round(0.05 + 0.1 * i, 2) for i in range(10))
PERCENTILES = (1, 5, 25, 75, 95, 99)

STATISTICAL_NAMES = (
    "mean",
    "median",
    "max",
    "min",
    "variance",
    "std",
    "skewness",
    "kurtosis",
    "rms",
    "iqr",
    "mean_abs_deviation",
    "median_abs_deviation",
    "range",
    "hist_mode",
    *(f"hist_bin_{i:02d}" for i in range(HIST_BINS)),
    *(f"quantile_{int(round(q * 100)):02d}" for q in QUANTILE_LEVELS),
    *(f"percentile_{p:02d}" for p in PERCENTILES),
)

SPECTRAL_SCALAR_NAMES = (
    "fundamental_frequency",
    "max_power_frequency",
    "median_frequency",
    "centroid",
    "spread",
    "skewness",
    "kurtosis",
    "slope",
    "decrease",
    "entropy",
    "variation",
    "rolloff",
    "rollon",
    "power_bandwidth",
    "max_psd",
)

DOMAIN_TAGS = {"temporal": "temporal", "statistical": "stat", "spectral": "spectral"}


class FeatureDomain(str, enum.Enum):
    TEMPORAL = "temporal"
    STATISTICAL = "statistical"
    SPECTRAL = "spectral"


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    domain: FeatureDomain
    channel: str
    index: int


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    catalog_id: str


def spectral_names(bands: int = DEFAULT_BANDS) -> tuple[str, ...]:
    return (
        *SPECTRAL_SCALAR_NAMES,
        *(f"band_mean_{b:03d}" for b in range(bands)),
        *(f"band_max_{b:03d}" for b in range(bands)),
    )


def catalog_id(bands: int = DEFAULT_BANDS) -> str:
    return f"lasermon-v1-b{bands}"


def catalog(bands: int = DEFAULT_BANDS) -> list[FeatureDescriptor]:
    """Canonical ordering: channel-major, then temporal, statistical, spectral."""
    out = []
    groups = (
        (FeatureDomain.TEMPORAL, TEMPORAL_NAMES),
        (FeatureDomain.STATISTICAL, STATISTICAL_NAMES),
        (FeatureDomain.SPECTRAL, spectral_names(bands)),
    )
    for channel in CHANNELS:
        for domain, names in groups:
            tag = DOMAIN_TAGS[domain.value]
            for name in names:
                out.append(FeatureDescriptor(f"{channel}.{tag}.{name}", domain, channel, len(out)))
    return out


def feature_names(bands: int = DEFAULT_BANDS) -> list[str]:
    return [d.name for d in catalog(bands)]


def _as_trace(trace, min_len: int) -> np.ndarray:
    x = np.asarray(trace, dtype=float)
    if x.ndim != 1 or len(x) < min_len:
        raise ValidationError(f"trace must be 1-d with length >= {min_len}, got shape {x.shape}")
    return x


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den != 0 else 0.0


def _lstsq_slope(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    return _ratio(np.dot(xc, y - y.mean()), np.dot(xc, xc))


# ---------------------------------------------------------------------------
# temporal


def temporal_features(trace) -> np.ndarray:
    x = _as_trace(trace, 2)
    n = len(x)
    d = np.diff(x)
    energy = float(np.dot(x, x))
    idx = np.arange(n, dtype=float)

    # local extrema: strict sign change of consecutive differences
    falling_then_rising = (d[:-1] < 0) & (d[1:] > 0)
    rising_then_falling = (d[:-1] > 0) & (d[1:] < 0)

    sign = x >= 0  # zeros count as positive
    crossings = np.count_nonzero(sign[1:] != sign[:-1])

    return np.array([
        energy,
        float(np.trapezoid(x)),
        _ratio(np.dot(x[:-1], x[1:]), energy),
        _ratio(np.dot(idx, x * x), energy),
        float(np.mean(np.abs(d))),
        float(np.mean(d)),
        float(np.median(np.abs(d))),
        float(np.median(d)),
        float(np.count_nonzero(falling_then_rising)),
        float(np.count_nonzero(rising_then_falling)),
        float(x.max() - x.min()),
        _lstsq_slope(idx, x),
        float(np.sum(np.abs(d))),
        crossings / (n - 1),
    ])


# ---------------------------------------------------------------------------
# statistical


def statistical_features(trace) -> np.ndarray:
    x = _as_trace(trace, 2)
    n = len(x)
    mean = float(np.mean(x))
    lo, hi = float(x.min()), float(x.max())
    centred = x - mean
    var = float(np.mean(centred**2))
    std = float(np.sqrt(var))
    if std > 0:
        z = centred / std  # standardize first so tiny spreads do not underflow
        skew = float(np.mean(z**3))
        kurt = float(np.mean(z**4)) - 3.0
    else:
        skew = kurt = 0.0
    median = float(np.median(x))
    q25, q75 = np.quantile(x, [0.25, 0.75])

    if hi > lo:
        # explicit binning: np.histogram rejects ranges too narrow to hold its edges
        span = hi - lo
        bins = np.minimum(((x - lo) / span * HIST_BINS).astype(np.int64), HIST_BINS - 1)
        counts = np.bincount(bins, minlength=HIST_BINS)
        mode_bin = int(np.argmax(counts))
        mode = lo + span * (mode_bin + 0.5) / HIST_BINS
    else:
        counts = np.zeros(HIST_BINS)
        counts[0] = n
        mode = lo
    hist = counts / n

    head = [
        mean,
        median,
        hi,
        lo,
        var,
        std,
        skew,
        kurt,
        float(np.sqrt(np.mean(x * x))),
        float(q75 - q25),
        float(np.mean(np.abs(centred))),
        float(np.median(np.abs(x - median))),
        hi - lo,
        float(mode),
    ]
    quantiles = np.quantile(x, QUANTILE_LEVELS)
    percentiles = np.percentile(x, PERCENTILES)
    return np.concatenate([head, hist, quantiles, percentiles]).astype(float)


# ---------------------------------------------------------------------------
# spectral


def _band_ids(freqs: np.ndarray, sample_rate: float, bands: int) -> np.ndarray:
    width = (sample_rate / 2.0) / bands
    ids = np.floor(freqs / width).astype(int)
    return np.minimum(ids, bands - 1)


def band_of_frequency(freq: float, sample_rate: float, bands: int = DEFAULT_BANDS) -> int:
    """Index of the equal-width band that contains ``freq``."""
    return int(_band_ids(np.array([freq]), sample_rate, bands)[0])


def _cumulative_frequency(freqs: np.ndarray, power: np.ndarray, level: float) -> float:
    cum = np.cumsum(power)
    k = int(np.searchsorted(cum, level * cum[-1], side="left"))
    return float(freqs[min(k, len(freqs) - 1)])


def spectral_features(trace, sample_rate: float, bands: int = DEFAULT_BANDS) -> np.ndarray:
    x = _as_trace(trace, 8)
    if not sample_rate > 0:
        raise ValidationError("sample_rate must be positive")
    if bands < 1:
        raise ValidationError("bands must be >= 1")
    n = len(x)
    spectrum = np.fft.rfft(x - x.mean())
    mag = np.abs(spectrum)
    power = mag * mag
    freqs = np.arange(len(mag)) * (sample_rate / n)
    total_power = float(power.sum())
    out = np.zeros(len(SPECTRAL_SCALAR_NAMES) + 2 * bands)
    if total_power == 0.0:
        return out

    mag_sum = float(mag.sum())
    centroid = _ratio(np.dot(freqs, mag), mag_sum)
    dev = freqs - centroid
    spread = np.sqrt(_ratio(np.dot(dev**2, mag), mag_sum))
    if spread > 0:
        skew = np.dot(dev**3, mag) / (spread**3 * mag_sum)
        kurt = np.dot(dev**4, mag) / (spread**4 * mag_sum)
    else:
        skew = kurt = 0.0

    k = np.arange(1, len(mag))
    decrease = _ratio(np.sum((mag[1:] - mag[0]) / k), float(mag[1:].sum()))

    p = power / total_power
    nz = p[p > 0]
    entropy = _ratio(-np.sum(nz * np.log(nz)), np.log(len(p)))

    half = len(mag) // 2
    first, second = mag[:half], mag[half:2 * half]
    if half >= 2 and first.std() > 0 and second.std() > 0:
        variation = 1.0 - float(np.corrcoef(first, second)[0, 1])
    else:
        variation = 0.0

    rolloff = _cumulative_frequency(freqs, power, 0.85)
    rollon = _cumulative_frequency(freqs, power, 0.05)

    out[:15] = [
        freqs[1 + int(np.argmax(mag[1:]))],
        freqs[int(np.argmax(power))],
        _cumulative_frequency(freqs, power, 0.5),
        centroid,
        spread,
        skew,
        kurt,
        _lstsq_slope(freqs, mag),
        decrease,
        entropy,
        variation,
        rolloff,
        rollon,
        rolloff - rollon,
        float(power.max()) / (sample_rate * n),
    ]

    ids = _band_ids(freqs, sample_rate, bands)
    counts = np.bincount(ids, minlength=bands)
    sums = np.bincount(ids, weights=mag, minlength=bands)
    means = np.divide(sums, counts, out=np.zeros(bands), where=counts > 0)
    maxes = np.zeros(bands)
    np.maximum.at(maxes, ids, mag)
    out[15:15 + bands] = means
    out[15 + bands:] = maxes
    return out


# ---------------------------------------------------------------------------
# per-sample extraction


def channel_features(trace, sample_rate: float, bands: int = DEFAULT_BANDS) -> np.ndarray:
    return np.concatenate([
        temporal_features(trace),
        statistical_features(trace),
        spectral_features(trace, sample_rate, bands),
    ])


def extract_sample(sample: Sample, bands: int = DEFAULT_BANDS) -> FeatureVector:
    layer = last_layer(sample)
    values = np.concatenate(
        [channel_features(layer.channel(c), layer.sample_rate, bands) for c in CHANNELS]
    )
    return FeatureVector(values, catalog_id(bands))


PARAM_COLUMNS = (
    "param.pulses_per_burst",
    "param.pulse_fluence",
    "param.laser_power",
    "param.num_layers",
    "param.initial_roughness",
)
TARGET_COLUMN = "target.final_roughness"


def parameter_row(sample: Sample) -> np.ndarray:
    return np.array([*sample.params.as_tuple(), sample.initial_roughness])


def write_feature_matrix(
    path: str | Path,
    samples: Iterable[Sample],
    bands: int = DEFAULT_BANDS,
) -> int:
    """Stream samples into the feature-matrix CSV; returns the row count."""
    names = feature_names(bands)
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*PARAM_COLUMNS, *names, TARGET_COLUMN])
        for sample in samples:
            vec = extract_sample(sample, bands).values
            w.writerow([format(v, ".17g") for v in (*parameter_row(sample), *vec, sample.final_roughness)])
            rows += 1
    return rows


def read_feature_matrix(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Return (input column names, input matrix, target vector)."""
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    if not header or header[-1] != TARGET_COLUMN:
        raise ValidationError(f"{path}: last column must be {TARGET_COLUMN}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header[:-1], data[:, :-1], data[:, -1]


def band_feature_names(channel: str, freq: float, sample_rate: float,
                       bands: int = DEFAULT_BANDS) -> Sequence[str]:
    b = band_of_frequency(freq, sample_rate, bands)
    return (f"{channel}.spectral.band_mean_{b:03d}", f"{channel}.spectral.band_max_{b:03d}")
