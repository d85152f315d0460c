"""Pointwise detection metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(flags, labels) -> ConfusionCounts:
    flags = np.asarray(flags, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if flags.shape != labels.shape:
        raise DimensionError(f"flags ({flags.size}) and labels ({labels.size}) differ in length")
    return ConfusionCounts(
        tp=int(np.sum(flags & labels)),
        fp=int(np.sum(flags & ~labels)),
        fn=int(np.sum(~flags & labels)),
        tn=int(np.sum(~flags & ~labels)),
    )


def metrics(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, f1); any zero denominator yields 0."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def point_adjust(flags, labels) -> np.ndarray:
    """Mark a whole labeled segment as detected when any of its points is flagged.

    Off by default everywhere; provided for comparison with published numbers
    that use this convention.
    """
    flags = np.asarray(flags, dtype=bool).copy()
    labels = np.asarray(labels, dtype=bool)
    if flags.shape != labels.shape:
        raise DimensionError("flags and labels differ in length")
    t = 0
    n = labels.size
    while t < n:
        if labels[t]:
            end = t
            while end < n and labels[end]:
                end += 1
            if flags[t:end].any():
                flags[t:end] = True
            t = end
        else:
            t += 1
    return flags


def metrics_report(flags, labels, threshold: float, adjust: bool = False) -> dict:
    flags = np.asarray(flags, dtype=bool)
    if adjust:
        flags = point_adjust(flags, labels)
    counts = confusion(flags, labels)
    p, r, f1 = metrics(counts)
    return {
        "precision": p,
        "recall": r,
        "f1": f1,
        "threshold": float(threshold),
        "n_anomalies": int(flags.sum()),
        "counts": asdict(counts),
        "point_adjust": bool(adjust),
    }


def write_metrics(report: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2) + "\n")
    return path
