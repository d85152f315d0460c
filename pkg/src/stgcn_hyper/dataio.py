"""Loading, cleaning, normalizing, splitting and windowing time series.

Also hosts the synthetic generator used for desk-scale end-to-end checks.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, IngestError, ParameterError

RANGE_EPS = 1e-12
CHANNEL_KINDS = ("stationary", "periodic", "high_frequency", "seasonal_spike", "step_change")


@dataclass
class TimeSeriesDataset:
    values: np.ndarray  # (T, N)
    feature_names: list[str]
    labels: np.ndarray | None = None  # (T,) bool
    timestamps: list[str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise IngestError(f"values must be 2-D (T, N), got shape {self.values.shape}")
        if len(self.feature_names) != self.values.shape[1]:
            raise IngestError("feature_names length does not match the number of columns")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise IngestError(f"duplicate feature names: {self.feature_names}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool)
            if self.labels.shape != (self.values.shape[0],):
                raise IngestError("labels length does not match the number of rows")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "TimeSeriesDataset":
        return TimeSeriesDataset(
            self.values[start:stop].copy(),
            list(self.feature_names),
            None if self.labels is None else self.labels[start:stop].copy(),
            None if self.timestamps is None else self.timestamps[start:stop],
        )


@dataclass
class NormalizationState:
    feature_names: list[str]
    minimum: np.ndarray
    maximum: np.ndarray

    def to_json(self) -> str:
        body = {
            name: {"min": float(lo), "max": float(hi)}
            for name, lo, hi in zip(self.feature_names, self.minimum, self.maximum)
        }
        return json.dumps(body, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NormalizationState":
        body = json.loads(text)
        names = list(body)
        return cls(
            names,
            np.array([body[n]["min"] for n in names], dtype=np.float64),
            np.array([body[n]["max"] for n in names], dtype=np.float64),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "NormalizationState":
        return cls.from_json(Path(path).read_text())


@dataclass
class WindowBatch:
    """inputs (B, N, K); targets (B, N); target_indices: row index of each target."""

    inputs: np.ndarray
    targets: np.ndarray
    target_indices: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


def strip_path_prefix(name: str) -> str:
    """'\\\\plant\\\\unit\\\\1_AIT_001_PV' -> '1_AIT_001_PV'."""
    return re.split(r"[\\/]", name.strip())[-1].strip()


def _parse_cell(text: str, row: int, col: str) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na", "null"):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise IngestError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None


def load_csv(
    path,
    label_column: str | None = "label",
    timestamp_column: str | None = None,
    require_labels: bool = False,
) -> TimeSeriesDataset:
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise IngestError(f"{path} is empty")
        names = [strip_path_prefix(h) for h in header]
        label_idx = names.index(label_column) if label_column and label_column in names else None
        time_idx = names.index(timestamp_column) if timestamp_column and timestamp_column in names else None
        if require_labels and label_idx is None:
            raise ConfigError(f"label column {label_column!r} required but missing from {path}")
        feat_idx = [i for i in range(len(names)) if i not in (label_idx, time_idx)]
        if not feat_idx:
            raise IngestError(f"{path} has no feature columns")

        rows, labels, stamps = [], [], []
        for r, record in enumerate(reader, start=2):
            if not record or all(c.strip() == "" for c in record):
                continue
            if len(record) != len(names):
                raise IngestError(f"row {r}: expected {len(names)} cells, got {len(record)}")
            rows.append([_parse_cell(record[i], r, names[i]) for i in feat_idx])
            if label_idx is not None:
                lab = _parse_cell(record[label_idx], r, names[label_idx])
                if lab not in (0.0, 1.0):
                    raise IngestError(f"row {r}, column {names[label_idx]!r}: label must be 0 or 1")
                labels.append(bool(lab))
            if time_idx is not None:
                stamps.append(record[time_idx].strip())
    if not rows:
        raise IngestError(f"{path} has a header but no data rows")
    return TimeSeriesDataset(
        np.array(rows, dtype=np.float64),
        [names[i] for i in feat_idx],
        np.array(labels, dtype=bool) if label_idx is not None else None,
        stamps if time_idx is not None else None,
    )


def save_csv(ds: TimeSeriesDataset, path, label_column: str = "label") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(ds.feature_names) + ([label_column] if ds.labels is not None else [])
        writer.writerow(header)
        for t in range(ds.length):
            row = [repr(float(v)) for v in ds.values[t]]
            if ds.labels is not None:
                row.append("1" if ds.labels[t] else "0")
            writer.writerow(row)


def clean(ds: TimeSeriesDataset) -> TimeSeriesDataset:
    """Fill all-missing columns with 0 and remaining gaps with the column mean."""
    values = ds.values.copy()
    missing = np.isnan(values)
    for j in range(values.shape[1]):
        col = missing[:, j]
        if not col.any():
            continue
        if col.all():
            values[:, j] = 0.0
        else:
            values[col, j] = values[~col, j].mean()
    return replace(ds, values=values)


def minmax_fit(train: TimeSeriesDataset) -> NormalizationState:
    return NormalizationState(
        list(train.feature_names), train.values.min(axis=0), train.values.max(axis=0)
    )


def minmax_apply(ds: TimeSeriesDataset, state: NormalizationState) -> TimeSeriesDataset:
    if list(ds.feature_names) != list(state.feature_names):
        raise IngestError("dataset features do not match the normalization state")
    span = state.maximum - state.minimum
    constant = span < RANGE_EPS
    scaled = (ds.values - state.minimum) / np.maximum(span, RANGE_EPS)
    scaled[:, constant] = 0.0
    return replace(ds, values=scaled)


def minmax_inverse(values: np.ndarray, state: NormalizationState) -> np.ndarray:
    span = state.maximum - state.minimum
    span = np.where(span < RANGE_EPS, 0.0, span)
    return np.asarray(values) * span + state.minimum


def split(
    ds: TimeSeriesDataset,
    ratios: Sequence[float] = (0.7, 0.15, 0.15),
    min_length: int = 1,
) -> tuple[TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset]:
    """Chronological train/val/test split; floor for the first two, remainder to test."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    T = ds.length
    n_train = int(math.floor(T * ratios[0] + 1e-9))
    n_val = int(math.floor(T * ratios[1] + 1e-9))
    bounds = [0, n_train, n_train + n_val, T]
    parts = tuple(ds.slice(bounds[i], bounds[i + 1]) for i in range(3))
    for name, part in zip(("train", "val", "test"), parts):
        if part.length < min_length:
            raise ConfigError(
                f"{name} split has {part.length} rows; needs at least {min_length} (window + horizon)"
            )
    return parts


def make_windows(values: np.ndarray, window: int, horizon: int = 1) -> WindowBatch:
    """All (window, target) pairs with stride 1 and copy padding of the first row.

    Window ending at row t (0-based) covers rows t-K+1..t, with negative rows
    replaced by row 0; its target is row t+h.  There are T-h pairs.
    """
    values = np.asarray(values, dtype=np.float64)
    if window < 1 or horizon < 1:
        raise ConfigError("window and horizon must be >= 1")
    T = values.shape[0]
    if T < horizon + 1:
        raise ConfigError(f"series of length {T} too short for horizon {horizon}")
    ends = np.arange(T - horizon)
    idx = np.clip(ends[:, None] + np.arange(-window + 1, 1)[None, :], 0, None)
    inputs = values[idx].transpose(0, 2, 1)  # (B, N, K)
    return WindowBatch(np.ascontiguousarray(inputs), values[ends + horizon].copy(), ends + horizon)


def iter_windows(
    values: np.ndarray,
    window: int,
    horizon: int = 1,
    batch_size: int = 64,
    order: np.ndarray | None = None,
) -> Iterator[WindowBatch]:
    """Stream mini-batches of windows, optionally in a given order of window positions."""
    values = np.asarray(values, dtype=np.float64)
    T = values.shape[0]
    if T < horizon + 1:
        raise ConfigError(f"series of length {T} too short for horizon {horizon}")
    ends_all = np.arange(T - horizon) if order is None else np.asarray(order)
    offsets = np.arange(-window + 1, 1)
    for s in range(0, len(ends_all), batch_size):
        ends = ends_all[s : s + batch_size]
        idx = np.clip(ends[:, None] + offsets[None, :], 0, None)
        yield WindowBatch(
            np.ascontiguousarray(values[idx].transpose(0, 2, 1)),
            values[ends + horizon],
            ends + horizon,
        )


# -- synthetic data -----------------------------------------------------------


@dataclass
class SynthSpec:
    """Description of a synthetic multichannel series with injected anomalies.

    ``anomaly_rate`` is the labeled fraction of the whole series; anomalies
    are only placed after ``anomaly_start`` (a fraction of the length), so a
    clean prefix can serve as normal-only training/validation data.
    """

    length: int = 20000
    channels: tuple[str, ...] = CHANNEL_KINDS
    anomaly_rate: float = 0.05
    anomaly_start: float = 0.0
    noise: float = 0.01
    segment_length: tuple[int, int] = (20, 40)
    magnitude: tuple[float, float] = (0.5, 1.0)
    kind_weights: dict = field(
        default_factory=lambda: {"burst": 0.6, "level_shift": 0.2, "dropout": 0.2}
    )


def _channel(kind: str, t: np.ndarray, rng: np.random.Generator, noise: float, latent: np.ndarray) -> np.ndarray:
    if kind == "stationary":
        return 0.3 + 0.05 * latent + noise * rng.standard_normal(t.size)
    if kind == "periodic":
        period = rng.uniform(30, 50)
        return 0.8 + 0.2 * np.sin(2 * np.pi * t / period) + 0.03 * latent + noise * rng.standard_normal(t.size)
    if kind == "high_frequency":
        p1, p2 = rng.uniform(5, 7), rng.uniform(9, 13)
        sig = 0.15 * np.sin(2 * np.pi * t / p1) + 0.1 * np.sin(2 * np.pi * t / p2 + 1.0)
        return 0.5 + sig + 2.0 * noise * rng.standard_normal(t.size)
    if kind == "seasonal_spike":
        period = int(rng.integers(20, 28))
        phase = (t % period) - period / 2
        bumps = 0.6 * np.exp(-0.5 * (phase / 2.5) ** 2)
        baseline = 0.2 + 0.1 * np.sin(2 * np.pi * t / 1500.0)
        return baseline + bumps + noise * rng.standard_normal(t.size)
    if kind == "step_change":
        period = int(rng.integers(300, 500))
        # smooth square wave: levels 0.7 / 0.95 with ~10-step ramps
        square = np.tanh(4.0 * np.sin(2 * np.pi * t / period))
        return 0.825 + 0.125 * square + 0.02 * latent + noise * rng.standard_normal(t.size)
    raise ParameterError(f"unknown channel kind {kind!r}; expected one of {CHANNEL_KINDS}")


def synth_generate(spec: SynthSpec, seed: int) -> TimeSeriesDataset:
    """Deterministic synthetic dataset with labeled bursts, level shifts and dropouts."""
    if not 0.0 <= spec.anomaly_rate < 0.5:
        raise ParameterError(f"anomaly rate must lie in [0, 0.5), got {spec.anomaly_rate}")
    if not 0.0 <= spec.anomaly_start < 1.0:
        raise ParameterError("anomaly_start must lie in [0, 1)")
    if spec.length < 2 or not spec.channels:
        raise ParameterError("need length >= 2 and at least one channel")
    rng = np.random.default_rng(seed)
    T = spec.length
    t = np.arange(T, dtype=np.float64)

    # shared slow AR(1) factor couples the channels
    shocks = rng.standard_normal(T) * 0.2
    latent = np.empty(T)
    latent[0] = 0.0
    for i in range(1, T):
        latent[i] = 0.98 * latent[i - 1] + shocks[i]

    values = np.column_stack([_channel(k, t, rng, spec.noise, latent) for k in spec.channels])
    names = [f"ch{j}_{k}" for j, k in enumerate(spec.channels)]
    labels = np.zeros(T, dtype=bool)

    target = int(round(spec.anomaly_rate * T))
    start = int(math.ceil(spec.anomaly_start * T))
    eligible = T - start
    if target > 0.9 * eligible:
        raise ParameterError("anomaly rate too high for the eligible (post-start) region")

    kinds = list(spec.kind_weights)
    weights = np.array([spec.kind_weights[k] for k in kinds], dtype=np.float64)
    weights /= weights.sum()
    lo, hi = spec.segment_length
    placed = 0
    attempts = 0
    N = values.shape[1]
    while placed < target and attempts < 100 * max(target, 1):
        attempts += 1
        length = min(int(rng.integers(lo, hi + 1)), target - placed)
        s = int(rng.integers(start, T - length + 1))
        # keep one normal step on each side so segments stay separate
        if labels[max(s - 1, 0) : min(s + length + 1, T)].any():
            continue
        kind = kinds[rng.choice(len(kinds), p=weights)]
        seg = slice(s, s + length)
        if kind == "burst":
            chans = rng.choice(N, size=min(N, int(rng.integers(1, 3))), replace=False)
            for c in chans:
                signs = rng.choice([-1.0, 1.0], size=length)
                values[seg, c] += signs * rng.uniform(*spec.magnitude, size=length)
        elif kind == "level_shift":
            c = int(rng.integers(N))
            values[seg, c] += rng.choice([-1.0, 1.0]) * rng.uniform(*spec.magnitude)
        else:  # dropout: sensor reads zero
            c = int(rng.integers(N))
            values[seg, c] = 0.0
        labels[seg] = True
        placed += length
    return TimeSeriesDataset(values, names, labels)
