"""Learned hypergraph structure and its normalized Laplacian.

Two node-embedding tables are squashed through ``tanh(alpha * E W)``; one
feeds a two-layer hyperedge generator, the other a sigmoid attention that
gates each (node, hyperedge) weight.  After a ReLU, one self-loop hyperedge
per node is appended, and the normalized Laplacian

    L = I - Dv^{-1/2} H De^{-1} H^T Dv^{-1/2}

is formed.  Everything is differentiable with respect to the embeddings and
weights.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, NumericError
from .numerics import Tensor

EDGE_DEGREE_FLOOR = 1e-8


@dataclass
class MtclParams:
    n1: Tensor  # (N, d)
    n2: Tensor  # (N, d)
    w1: Tensor  # (d, d)
    w2: Tensor  # (d, d)
    wh1: Tensor  # (d, hidden)
    wh2: Tensor  # (hidden, m)
    wa: Tensor  # (d, m)
    alpha: float = 3.0
    attention_source: str = "n2"

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("n1", "n2", "w1", "w2", "wh1", "wh2", "wa")}


@dataclass
class HypergraphStructure:
    H: Tensor  # (N, m + N)
    dv: Tensor  # (N,) node degrees, the diagonal of Dv
    de: Tensor  # (m + N,) hyperedge degrees, the diagonal of De
    theta: Tensor  # Dv^{-1/2} H De^{-1} H^T Dv^{-1/2}
    L: Tensor

    @property
    def Dv(self) -> np.ndarray:
        return np.diag(self.dv.data)

    @property
    def De(self) -> np.ndarray:
        return np.diag(self.de.data)


def default_hyperedges(n_nodes: int) -> int:
    return max(1, math.ceil(n_nodes / 2))


def init_mtcl(
    n_nodes: int,
    rng: np.random.Generator,
    embed_dim: int = 16,
    hyperedges: int | None = None,
    hidden: int | None = None,
    alpha: float = 3.0,
    attention_source: str = "n2",
) -> MtclParams:
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    if attention_source not in ("n1", "n2"):
        raise ConfigError("attention_source must be 'n1' or 'n2'")
    m = default_hyperedges(n_nodes) if hyperedges is None else hyperedges
    if m < 1:
        raise ConfigError("need at least one learned hyperedge")
    hidden = embed_dim if hidden is None else hidden
    bound = 1.0 / math.sqrt(embed_dim)

    def u(*shape):
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    return MtclParams(
        n1=u(n_nodes, embed_dim),
        n2=u(n_nodes, embed_dim),
        w1=u(embed_dim, embed_dim),
        w2=u(embed_dim, embed_dim),
        wh1=u(embed_dim, hidden),
        wh2=u(hidden, m),
        wa=u(embed_dim, m),
        alpha=alpha,
        attention_source=attention_source,
    )


def embed_transform(params: MtclParams) -> tuple[Tensor, Tensor]:
    n1t = nx.tanh((params.n1 @ params.w1) * params.alpha)
    n2t = nx.tanh((params.n2 @ params.w2) * params.alpha)
    return n1t, n2t


def hyperedge_generator(n1t: Tensor, wh1: Tensor, wh2: Tensor) -> Tensor:
    return nx.relu(n1t @ wh1) @ wh2


def attention_scores(emb: Tensor, wa: Tensor) -> Tensor:
    return nx.sigmoid(emb @ wa)


def build_incidence(gen, att) -> Tensor:
    gen, att = nx.as_tensor(gen), nx.as_tensor(att)
    if gen.shape != att.shape:
        raise DimensionError(f"generator {gen.shape} and attention {att.shape} shapes differ")
    return nx.relu(gen * att)


def augment_self_loops(h_raw) -> Tensor:
    h_raw = nx.as_tensor(h_raw)
    n = h_raw.shape[0]
    return nx.concat([h_raw, Tensor(np.eye(n))], axis=1)


def degrees(H) -> tuple[Tensor, Tensor]:
    """Row sums (node degrees) and column sums floored at 1e-8 (hyperedge degrees)."""
    H = nx.as_tensor(H)
    if (H.data < 0).any():
        raise NumericError("incidence matrix has negative entries")
    dv = H.sum(axis=1)
    de = nx.maximum(H.sum(axis=0), EDGE_DEGREE_FLOOR)
    return dv, de


def propagation_operator(H, dv, de) -> Tensor:
    """Theta = Dv^{-1/2} H De^{-1} H^T Dv^{-1/2}, computed as B B^T."""
    H, dv, de = nx.as_tensor(H), nx.as_tensor(dv), nx.as_tensor(de)
    if (dv.data <= 0).any() or (de.data <= 0).any():
        raise NumericError("degree matrices must be strictly positive")
    B = H * dv.reshape(-1, 1) ** -0.5 * de.reshape(1, -1) ** -0.5
    return B @ B.T


def laplacian(H, dv, de) -> Tensor:
    theta = propagation_operator(H, dv, de)
    return Tensor(np.eye(theta.shape[0])) - theta


def build_structure(params: MtclParams) -> HypergraphStructure:
    n1t, n2t = embed_transform(params)
    gen = hyperedge_generator(n1t, params.wh1, params.wh2)
    att = attention_scores(n2t if params.attention_source == "n2" else n1t, params.wa)
    H = augment_self_loops(build_incidence(gen, att))
    dv, de = degrees(H)
    theta = propagation_operator(H, dv, de)
    return HypergraphStructure(H, dv, de, theta, Tensor(np.eye(theta.shape[0])) - theta)


def identity_structure(n_nodes: int) -> HypergraphStructure:
    """Fixed structure with only self-loop hyperedges (H = I, L = 0)."""
    H = Tensor(np.eye(n_nodes))
    dv, de = degrees(H)
    theta = propagation_operator(H, dv, de)
    return HypergraphStructure(H, dv, de, theta, Tensor(np.eye(n_nodes)) - theta)


def snapshot_laplacian(L, epoch: int, directory, feature_names=None) -> Path:
    """Write L to ``laplacian_epoch{epoch}.csv`` (header row = feature names)."""
    data = L.data if isinstance(L, Tensor) else np.asarray(L)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"laplacian_epoch{epoch}.csv"
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(data.shape[0])]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])
    return path


def load_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
