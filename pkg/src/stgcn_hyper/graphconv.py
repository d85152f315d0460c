"""Spatial propagation over the learned structure.

Two paths: hypergraph convolution ``relu(Theta X W)`` with the propagation
operator of a `HypergraphStructure`, and the graph-structure-learning path
(cosine similarity of node embeddings, top-K neighbours, symmetric-normalized
GCN).  X may be (N, F) or batched (B, N, F).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import DimensionError, ParameterError
from .hypergraph import HypergraphStructure
from .numerics import Tensor

NORM_EPS = 1e-12


@dataclass
class GslState:
    embeddings: Tensor  # (N, d)
    k: int
    binary: bool = False


def _node_mix(op, x) -> Tensor:
    op, x = nx.as_tensor(op), nx.as_tensor(x)
    if x.ndim == 2:
        if x.shape[0] != op.shape[1]:
            raise DimensionError(f"operator {op.shape} does not match features {x.shape}")
        return op @ x
    if x.ndim == 3:
        if x.shape[1] != op.shape[1]:
            raise DimensionError(f"operator {op.shape} does not match features {x.shape}")
        return nx.einsum("nm,bmf->bnf", op, x)
    raise DimensionError(f"features must be (N, F) or (B, N, F), got {x.shape}")


def hypergraph_conv(x, hg, w) -> Tensor:
    """relu(Dv^-1/2 H De^-1 H^T Dv^-1/2 X W); ``hg`` is a structure or its Theta."""
    theta = hg.theta if isinstance(hg, HypergraphStructure) else nx.as_tensor(hg)
    return nx.relu(_node_mix(theta, x) @ w)


def residual_correlation(e) -> Tensor:
    """Cosine similarity between embedding rows (norms floored at 1e-12)."""
    e = nx.as_tensor(e)
    norms = nx.maximum(nx.sqrt((e * e).sum(axis=1, keepdims=True)), NORM_EPS)
    unit = e / norms
    return unit @ unit.T


def topk_select(c, k: int) -> np.ndarray:
    """Per row, indices of the k largest off-diagonal entries; ties go to the lower index."""
    c = c.data if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64)
    n = c.shape[0]
    if not 1 <= k <= n - 1:
        raise ParameterError(f"top-K needs 1 <= K <= N-1 = {n - 1}, got {k}")
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = c[i].copy()
        row[i] = -np.inf
        # stable sort on -row keeps lower indices first among equals
        order = np.argsort(-row, kind="stable")
        out[i] = order[:k]
    return out


def topk_mask(topk: np.ndarray, n: int) -> np.ndarray:
    mask = np.zeros((n, n))
    mask[np.repeat(np.arange(n), topk.shape[1]), topk.reshape(-1)] = 1.0
    return mask


def build_adjacency(c, topk: np.ndarray, binary: bool = False) -> Tensor:
    """A_ij = relu(C_ij) on selected pairs (1 if binary), plus self-loops."""
    c = nx.as_tensor(c)
    n = c.shape[0]
    mask = topk_mask(topk, n)
    eye = Tensor(np.eye(n))
    if binary:
        return Tensor(mask) + eye
    return nx.relu(c) * mask + eye


def gsl_adjacency(state: GslState) -> Tensor:
    c = residual_correlation(state.embeddings)
    k = min(state.k, c.shape[0] - 1)
    return build_adjacency(c, topk_select(c, k), binary=state.binary)


def normalized_adjacency(a) -> Tensor:
    a = nx.as_tensor(a)
    deg = a.sum(axis=1)
    if (deg.data <= 0).any():
        raise ParameterError("adjacency has a node with non-positive degree")
    inv = deg**-0.5
    return a * inv.reshape(-1, 1) * inv.reshape(1, -1)


def gcn_propagate(x, a, w) -> Tensor:
    """relu(D^-1/2 A D^-1/2 X W) with D the row-degree matrix of A."""
    return nx.relu(_node_mix(normalized_adjacency(a), x) @ w)


def snapshot_adjacency(a, epoch: int, directory, feature_names=None) -> Path:
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"adjacency_epoch{epoch}.csv"
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(data.shape[0])]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])
    return path
