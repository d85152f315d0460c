"""Glue between a trained checkpoint and the detectors.

The detector is fitted on validation forecast errors and applied to the
test errors; both error matrices come from mask-free predictions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataio import TimeSeriesDataset
from .detectors import (
    AnomalyReport,
    ErrorNormalizer,
    SlidingWindowNormalizer,
    detect,
    gmm_fit,
    gmm_score,
    pca_fit,
    pca_score,
)
from .errors import ConfigError
from .model import Checkpoint, predict

DETECTORS = ("gmm", "pca")


@dataclass
class DetectorConfig:
    kind: str = "gmm"
    threshold: str = "max"  # or "quantile:q"
    k_mode: str = "bic"  # or "f1" (needs validation labels)
    k_max: int = 5
    n_components: int | None = None
    variance_target: float = 0.95
    sliding_window: int | None = None  # rolling error normalization; off by default
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DETECTORS:
            raise ConfigError(f"detector must be one of {DETECTORS}, got {self.kind!r}")
        if self.k_mode not in ("bic", "f1"):
            raise ConfigError("k_mode must be 'bic' or 'f1'")
        if self.sliding_window is not None and self.sliding_window < 2:
            raise ConfigError("sliding_window must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DetectionResult:
    report: AnomalyReport
    detector: object
    val_scores: np.ndarray
    val_indices: np.ndarray


def forecast_errors(ds: TimeSeriesDataset, checkpoint: Checkpoint, threads: int = 1):
    """(errors (T-h, N), target row indices) for every window of ``ds``."""
    preds, targets, idx = predict(ds.values, checkpoint, threads=threads)
    return preds - targets, idx


def run_detection(
    val: TimeSeriesDataset,
    test: TimeSeriesDataset,
    checkpoint: Checkpoint,
    config: DetectorConfig | None = None,
    threads: int = 1,
) -> DetectionResult:
    config = config or DetectorConfig()
    ev, val_idx = forecast_errors(val, checkpoint, threads)
    et, test_idx = forecast_errors(test, checkpoint, threads)
    if config.sliding_window:
        norm = SlidingWindowNormalizer(config.sliding_window).fit(ev)
    else:
        norm = ErrorNormalizer().fit(ev)
    zv, zt = norm.transform(ev), norm.transform(et)

    if config.kind == "pca":
        det = pca_fit(zv, config.variance_target, config.threshold)
        val_scores, test_scores = pca_score(zv, det), pca_score(zt, det)
        contributions = det.residual(zt)
    else:
        labels = None if val.labels is None else val.labels[val_idx]
        if config.k_mode == "f1" and labels is None:
            raise ConfigError("k_mode 'f1' needs a labeled validation split")
        det = gmm_fit(
            zv,
            k_mode=config.k_mode,
            k_max=config.k_max,
            n_components=config.n_components,
            labels=labels,
            threshold_policy=config.threshold,
            seed=config.seed,
        )
        val_scores, test_scores = gmm_score(zv, det), gmm_score(zt, det)
        contributions = zt
    report = detect(
        test_scores,
        det.threshold,
        contributions,
        timesteps=test_idx,
        feature_names=checkpoint.feature_names,
        detector=config.kind,
    )
    return DetectionResult(report, det, val_scores, val_idx)
