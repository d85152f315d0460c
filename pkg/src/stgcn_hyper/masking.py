"""Multi-stage input masking used during training.

Stage ``random`` masks node-time positions i.i.d.  Stage ``laplacian``
masks nodes in proportion to a temperature softmax of the Laplacian diagonal
and steps in proportion to a geometric temporal weight that leaves the
newest steps least masked.  Masks are 1 = keep, 0 = masked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, ParameterError

STAGES = ("random", "laplacian", "off")


@dataclass
class MaskConfig:
    base_ratio: float = 0.1
    tau: float = 1.0
    alpha_decay: float = 0.95
    stage_boundaries: tuple[int, ...] | None = None  # epoch where laplacian masking begins
    invert_importance: bool = False
    enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.base_ratio < 1.0:
            raise ConfigError("mask base_ratio must lie in (0, 1)")
        if not self.tau > 0:
            raise ConfigError("mask tau must be positive")
        if not 0.0 < self.alpha_decay <= 1.0:
            raise ConfigError("mask alpha_decay must lie in (0, 1]")
        if self.stage_boundaries is not None:
            self.stage_boundaries = tuple(int(b) for b in self.stage_boundaries)
            if any(b2 < b1 for b1, b2 in zip(self.stage_boundaries, self.stage_boundaries[1:])):
                raise ConfigError("stage_boundaries must be nondecreasing")


def importance_scores(L) -> np.ndarray:
    L = L.data if isinstance(L, nx.Tensor) else np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise DimensionError(f"Laplacian must be square, got {L.shape}")
    return np.diag(L).copy()


def mask_probabilities(scores, tau: float) -> np.ndarray:
    return nx.softmax_temperature(np.asarray(scores, dtype=np.float64), tau).data


def temporal_weights(alpha: float, length: int) -> np.ndarray:
    """w(t) = alpha**t / sum_k alpha**k, t = 0 being the most recent step."""
    if not 0.0 < alpha <= 1.0:
        raise ParameterError("alpha must lie in (0, 1]")
    if length < 1:
        raise ParameterError("length must be >= 1")
    w = alpha ** np.arange(length, dtype=np.float64)
    return w / w.sum()


def stage_for_epoch(epoch: int, config: MaskConfig, total_epochs: int | None = None, training: bool = True) -> str:
    """Stage schedule: 'random' before the first boundary, then 'laplacian'.

    Without explicit boundaries the switch happens after the first third of
    ``total_epochs``.  A second boundary, when given, turns masking off.
    """
    if not training or not config.enabled:
        return "off"
    if epoch < 0:
        raise ParameterError("epoch must be >= 0")
    bounds = config.stage_boundaries
    if bounds is None:
        bounds = (math.ceil(total_epochs / 3),) if total_epochs else (0,)
    stage_idx = sum(epoch >= b for b in bounds)
    return ("random", "laplacian", "off")[min(stage_idx, 2)]


def masking_intensity(probs, weights, ratio: float) -> np.ndarray:
    """(N, T) per-position masking probability of the laplacian stage.

    Array time index 0 is the oldest step, T-1 the newest; a step of age a gets
    weight ``w(T-1-a)``.  Node and time factors are scaled by N and T so the
    mean probability is ``ratio`` before clipping.
    """
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n, t = probs.size, weights.size
    # position i has age T-1-i, so w(T-1-age) is simply w(i)
    time_factor = t * weights
    return np.clip(ratio * np.outer(n * probs, time_factor), 0.0, 1.0)


def sample_mask(
    probs,
    weights,
    ratio: float,
    stage: str,
    seed,
    shape: tuple[int, int, int, int],
) -> np.ndarray:
    """Binary keep-mask of ``shape`` (B, F, N, T)."""
    if stage not in STAGES:
        raise ParameterError(f"unknown masking stage {stage!r}")
    if stage == "off":
        return np.ones(shape)
    if not 0.0 < ratio < 1.0:
        raise ParameterError("mask ratio must lie in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    B, F, N, T = shape
    if stage == "random":
        p = np.full((N, T), ratio)
    else:
        if len(probs) != N or len(weights) != T:
            raise DimensionError("probabilities/weights do not match mask shape")
        p = masking_intensity(probs, weights, ratio)
    return (rng.random(shape) >= p[None, None]).astype(np.float64)


def apply_mask(x, mask) -> nx.Tensor:
    x = nx.as_tensor(x)
    mask = np.asarray(mask)
    if x.shape != mask.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match input {x.shape}")
    return x * mask


def laplacian_mask_inputs(L, config: MaskConfig, length: int) -> tuple[np.ndarray, np.ndarray]:
    scores = importance_scores(L)
    if config.invert_importance:
        scores = -scores
    return mask_probabilities(scores, config.tau), temporal_weights(config.alpha_decay, length)
