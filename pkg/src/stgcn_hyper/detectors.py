"""Anomaly scoring on forecast errors.

Errors ``prediction - target`` are standardized with validation statistics
and scored either by their distance from a principal subspace (PCA) or by
their negative log-likelihood under a diagonal Gaussian mixture fitted with
expectation-maximization.  Thresholds are taken from validation scores.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DataError, DimensionError, NumericError, ParameterError

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
VAR_FLOOR = 1e-6
EIG_FLOOR = 1e-12


# -- error normalization ------------------------------------------------------


@dataclass
class ErrorNormalizer:
    """Per-feature (e - mean) / std with statistics from validation errors."""

    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def fit(self, errors: np.ndarray) -> "ErrorNormalizer":
        errors = np.asarray(errors, dtype=np.float64)
        self.mean = errors.mean(axis=0)
        self.std = np.maximum(errors.std(axis=0), STD_FLOOR)
        return self

    def transform(self, errors: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise ConfigError("ErrorNormalizer used before fit")
        return (np.asarray(errors, dtype=np.float64) - self.mean) / self.std


@dataclass
class SlidingWindowNormalizer:
    """Standardize each row with mean/std of the preceding ``window`` rows.

    Rows with fewer than two predecessors fall back to the fitted statistics.
    """

    window: int = 100
    base: ErrorNormalizer = field(default_factory=ErrorNormalizer)

    def fit(self, errors: np.ndarray) -> "SlidingWindowNormalizer":
        self.base.fit(errors)
        return self

    def transform(self, errors: np.ndarray) -> np.ndarray:
        errors = np.asarray(errors, dtype=np.float64)
        out = self.base.transform(errors)
        csum = np.vstack([np.zeros(errors.shape[1]), np.cumsum(errors, axis=0)])
        csq = np.vstack([np.zeros(errors.shape[1]), np.cumsum(errors**2, axis=0)])
        for t in range(2, errors.shape[0]):
            lo = max(0, t - self.window)
            n = t - lo
            mu = (csum[t] - csum[lo]) / n
            var = np.maximum((csq[t] - csq[lo]) / n - mu**2, 0.0)
            out[t] = (errors[t] - mu) / np.maximum(np.sqrt(var), STD_FLOOR)
        return out


@dataclass
class ErrorMatrix:
    raw: np.ndarray  # (T', N) prediction - target
    normalized: np.ndarray


def compute_errors(predictions, targets, normalizer=None) -> ErrorMatrix:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise DimensionError(f"predictions {predictions.shape} and targets {targets.shape} differ")
    raw = predictions - targets
    if normalizer is None:
        normalizer = ErrorNormalizer().fit(raw)
    return ErrorMatrix(raw, normalizer.transform(raw))


# -- thresholds ---------------------------------------------------------------


def threshold_select(val_scores, policy="max") -> float:
    """'max' -> largest validation score; 'quantile:q' or ('quantile', q) -> empirical q-quantile."""
    scores = np.asarray(val_scores, dtype=np.float64)
    if scores.size == 0:
        raise ParameterError("threshold selection needs at least one validation score")
    if isinstance(policy, tuple):
        kind, q = policy
    elif isinstance(policy, str) and policy.startswith("quantile"):
        kind, _, q = policy.partition(":")
        q = float(q) if q else 0.99
    else:
        kind, q = policy, None
    if kind == "max":
        return float(scores.max())
    if kind == "quantile":
        q = float(q)
        if not 0.0 <= q <= 1.0:
            raise ParameterError("quantile must lie in [0, 1]")
        return float(np.quantile(scores, q))
    raise ParameterError(f"unknown threshold policy {policy!r}")


# -- PCA ----------------------------------------------------------------------


@dataclass
class PcaDetector:
    basis: np.ndarray  # (N, p) orthonormal columns
    explained: np.ndarray  # eigenvalues, descending
    threshold: float = math.inf

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    def residual(self, errors: np.ndarray) -> np.ndarray:
        errors = np.asarray(errors, dtype=np.float64)
        if errors.ndim != 2 or errors.shape[1] != self.basis.shape[0]:
            raise DimensionError(f"detector expects {self.basis.shape[0]} features, got {errors.shape}")
        return errors - (errors @ self.basis) @ self.basis.T


def pca_fit(
    val_errors,
    variance_target: float = 0.95,
    threshold_policy="max",
    n_components: int | None = None,
) -> PcaDetector:
    """Principal subspace of the validation error covariance.

    Keeps the smallest number of components whose eigenvalues explain at
    least ``variance_target`` of the total variance (or ``n_components``).
    The automatic choice stops at N - 1 so a residual subspace always remains;
    with every component kept the score is pure roundoff.
    """
    e = np.asarray(val_errors, dtype=np.float64)
    T, N = e.shape
    if T < N:
        raise DataError(f"need at least {N} validation rows, got {T}")
    if not 0.0 < variance_target <= 1.0:
        raise ParameterError("variance_target must lie in (0, 1]")
    cov = np.cov(e, rowvar=False, bias=True).reshape(N, N)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.maximum(vals[order], 0.0)
    vecs = vecs[:, order]
    if n_components is None:
        total = vals.sum()
        if total <= EIG_FLOOR:
            p = N
        else:
            ratio = np.cumsum(vals) / total
            p = int(np.searchsorted(ratio, variance_target - 1e-10) + 1)
        p = min(max(p, 1), max(N - 1, 1))
    else:
        if not 1 <= n_components <= N:
            raise ParameterError(f"n_components must lie in [1, {N}]")
        p = n_components
    basis, _ = np.linalg.qr(vecs[:, :p])
    det = PcaDetector(basis, vals)
    det.threshold = threshold_select(pca_score(e, det), threshold_policy)
    return det


def pca_score(test_errors, det: PcaDetector) -> np.ndarray:
    """Euclidean norm of each error vector's component outside the principal subspace."""
    return np.linalg.norm(det.residual(test_errors), axis=1)


# -- GMM ----------------------------------------------------------------------


@dataclass
class GmmDetector:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, N)
    variances: np.ndarray  # (k, N) diagonal covariances
    threshold: float = math.inf
    log_likelihood: list[float] = field(default_factory=list)  # per EM iteration (mean per row)
    bic: float | None = None
    converged: bool = False

    @property
    def n_components(self) -> int:
        return self.weights.size

    def component_log_density(self, x: np.ndarray) -> np.ndarray:
        """(T, k) log w_k + log N(x; mu_k, diag var_k)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.means.shape[1]:
            raise DimensionError(f"detector expects {self.means.shape[1]} features, got {x.shape}")
        diff = x[:, None, :] - self.means[None]
        maha = (diff**2 / self.variances[None]).sum(axis=2)
        logdet = np.log(self.variances).sum(axis=1)
        n = x.shape[1]
        return np.log(self.weights)[None] - 0.5 * (maha + logdet[None] + n * math.log(2 * math.pi))


def _em(x: np.ndarray, k: int, rng: np.random.Generator, tol: float, max_iter: int, max_retries: int):
    T, N = x.shape
    means = x[rng.choice(T, size=k, replace=False)].copy()
    variances = np.tile(np.maximum(x.var(axis=0), VAR_FLOOR), (k, 1))
    weights = np.full(k, 1.0 / k)
    det = GmmDetector(weights, means, variances)
    history: list[float] = []
    retries = 0
    reinit = False
    for it in range(max_iter):
        logp = det.component_log_density(x)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.mean())
        if history and not reinit and ll < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise NumericError(f"EM log-likelihood decreased at iteration {it}: {history[-1]} -> {ll}")
        history.append(ll)
        reinit = False
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            det.converged = True
            break
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        empty = nk < 1e-10 * T
        if empty.any():
            if retries >= max_retries:
                raise NumericError("EM collapsed: empty component after maximum re-initializations")
            retries += 1
            for j in np.flatnonzero(empty):
                resp[:, j] = 0.0
                resp[rng.integers(T), j] = 1.0
            nk = resp.sum(axis=0)
            reinit = True
        det.weights = nk / nk.sum()
        det.means = (resp.T @ x) / nk[:, None]
        sq = (resp.T @ (x**2)) / nk[:, None] - det.means**2
        det.variances = np.maximum(sq, VAR_FLOOR)
    det.log_likelihood = history
    final = float(logsumexp(det.component_log_density(x), axis=1).sum())
    n_params = k * 2 * N + (k - 1)
    det.bic = -2.0 * final + n_params * math.log(T)
    return det


def gmm_fit(
    val_errors,
    k_mode: str = "bic",
    k_max: int = 5,
    n_components: int | None = None,
    labels=None,
    threshold_policy="max",
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 200,
    max_retries: int = 3,
) -> GmmDetector:
    """Diagonal Gaussian mixture on validation errors.

    Component count: fixed ``n_components``; ``k_mode='bic'`` sweeps 1..k_max
    and keeps the lowest BIC; ``k_mode='f1'`` needs validation ``labels`` and
    keeps the count whose scores best separate them.
    """
    x = np.asarray(val_errors, dtype=np.float64)
    T = x.shape[0]
    candidates = [n_components] if n_components is not None else list(range(1, k_max + 1))
    candidates = [k for k in candidates if T >= 10 * k]
    if not candidates:
        raise DataError(f"need at least 10 rows per component, got {T} rows")

    best, best_key = None, None
    for k in candidates:
        det = _em(x, k, np.random.default_rng([seed, k]), tol, max_iter, max_retries)
        if n_components is not None or k_mode == "bic":
            key = det.bic
        elif k_mode == "f1":
            if labels is None:
                raise ConfigError("k_mode='f1' needs validation labels")
            key = -_best_f1(gmm_score(x, det), np.asarray(labels, dtype=bool))
        else:
            raise ParameterError(f"unknown k_mode {k_mode!r}")
        if best_key is None or key < best_key:
            best, best_key = det, key
    best.threshold = threshold_select(gmm_score(x, best), threshold_policy)
    return best


def _best_f1(scores: np.ndarray, labels: np.ndarray) -> float:
    from .evaluation import confusion, metrics

    best = 0.0
    for thr in np.unique(scores):
        best = max(best, metrics(confusion(scores > thr, labels))[2])
    return best


def gmm_score(errors, det: GmmDetector) -> np.ndarray:
    """Negative log-likelihood of each row under the mixture."""
    return -logsumexp(det.component_log_density(errors), axis=1)


# -- decisions ----------------------------------------------------------------


@dataclass
class AnomalyReport:
    scores: np.ndarray
    threshold: float
    flags: np.ndarray
    top_feature: np.ndarray  # feature index per step, -1 where not flagged
    timesteps: np.ndarray | None = None
    feature_names: list[str] | None = None
    detector: str = ""

    def to_csv(self, path) -> Path:
        path = Path(path)
        steps = self.timesteps if self.timesteps is not None else np.arange(self.scores.size)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestep", "score", "threshold", "flag", "top_feature"])
            for t, s, f, top in zip(steps, self.scores, self.flags, self.top_feature):
                name = "" if top < 0 else (self.feature_names[top] if self.feature_names else str(int(top)))
                w.writerow([int(t), repr(float(s)), repr(float(self.threshold)), int(bool(f)), name])
        return path

    def summary(self) -> dict:
        return {
            "detector": self.detector,
            "threshold": float(self.threshold),
            "n_scored": int(self.scores.size),
            "n_anomalies": int(self.flags.sum()),
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "AnomalyReport":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"report not found: {path}")
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            return cls(np.zeros(0), math.inf, np.zeros(0, bool), np.zeros(0, int), np.zeros(0, int))
        return cls(
            np.array([float(r["score"]) for r in rows]),
            float(rows[0]["threshold"]),
            np.array([r["flag"] == "1" for r in rows]),
            np.full(len(rows), -1),
            np.array([int(r["timestep"]) for r in rows]),
        )


def detect(test_scores, threshold: float, contributions=None, **kw) -> AnomalyReport:
    """Flag scores above ``threshold``; attribute each flag to argmax |contribution|."""
    scores = np.asarray(test_scores, dtype=np.float64)
    flags = scores > threshold
    top = np.full(scores.size, -1, dtype=np.int64)
    if contributions is not None:
        contrib = np.abs(np.asarray(contributions, dtype=np.float64))
        if contrib.shape[0] != scores.size:
            raise DimensionError("contributions must have one row per score")
        top[flags] = np.argmax(contrib[flags], axis=1)
    return AnomalyReport(scores, float(threshold), flags, top, **kw)
