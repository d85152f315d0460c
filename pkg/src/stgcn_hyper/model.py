"""The h-step forecaster: masking -> TCN -> spatial convolution -> MLP head.

Spatial structure comes from the learned hypergraph by default; the GSL
path and four ablation variants are selected through `ModelConfig`:

    full       learned hypergraph + hypergraph convolution
    no_hyper   binary top-K graph from node embeddings + plain GCN
    no_tcn     per-node MLP over the window instead of TCN blocks
    no_gcn     dense learned node-mixing layer instead of graph convolution
    no_mtcl    fixed identity hypergraph (H = I) instead of the learned one
"""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .dataio import NormalizationState, iter_windows
from .errors import ConfigError, DataError, NumericError
from .graphconv import GslState, gcn_propagate, gsl_adjacency, hypergraph_conv, normalized_adjacency
from .hypergraph import (
    HypergraphStructure,
    MtclParams,
    build_structure,
    identity_structure,
    init_mtcl,
    snapshot_laplacian,
)
from .masking import MaskConfig, apply_mask, laplacian_mask_inputs, sample_mask, stage_for_epoch
from .numerics import Tensor
from .tcn import TcnConfig, TcnLayerParams, TcnParams, conv1x1, init_tcn, required_length, tcn_forward

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_hyper", "no_tcn", "no_gcn", "no_mtcl")
STRUCTURES = ("mtcl", "gsl")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    window: int = 16
    horizon: int = 1
    tcn: TcnConfig = field(default_factory=TcnConfig)
    embed_dim: int = 16
    hyperedges: int | None = None
    alpha: float = 3.0
    attention_source: str = "n2"
    gsl_k: int = 3
    spatial_channels: int = 32
    mlp_widths: tuple[int, ...] = (32,)
    mask: MaskConfig = field(default_factory=MaskConfig)
    ablation: str = "full"
    structure_mode: str = "mtcl"
    lr: float = 1e-3
    momentum: float = 0.9
    grad_clip: float = 5.0
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.tcn, dict):
            self.tcn = _from_dict(TcnConfig, self.tcn)
        if isinstance(self.mask, dict):
            self.mask = _from_dict(MaskConfig, self.mask)
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.structure_mode not in STRUCTURES:
            raise ConfigError(f"structure_mode must be one of {STRUCTURES}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if any(w < 1 for w in self.mlp_widths) or self.spatial_channels < 1 or self.embed_dim < 1:
            raise ConfigError("layer widths must be positive")
        if self.ablation != "no_tcn" and self.window < required_length(self.tcn):
            raise ConfigError(
                f"window {self.window} shorter than the TCN receptive field {required_length(self.tcn)}"
            )
        if self.window < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("window, batch_size must be >= 1 and epochs >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, body: dict) -> "ModelConfig":
        return _from_dict(cls, body)


def _from_dict(cls, body: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(body) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**body)


@dataclass
class ModelState:
    """Parameters plus batch-norm running statistics for one model instance."""

    config: ModelConfig
    n_nodes: int
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]

    def tcn_params(self) -> TcnParams:
        p = self.params
        tp = TcnParams(start=p["tcn.start"], start_bias=p["tcn.start_bias"])
        nk = len(self.config.tcn.kernel_sizes)
        for i in range(self.config.tcn.layers):
            tp.layers.append(
                TcnLayerParams(
                    filter_kernels=[p[f"tcn.{i}.filter{j}"] for j in range(nk)],
                    filter_biases=[p[f"tcn.{i}.filter{j}_bias"] for j in range(nk)],
                    gate_kernels=[p[f"tcn.{i}.gate{j}"] for j in range(nk)],
                    gate_biases=[p[f"tcn.{i}.gate{j}_bias"] for j in range(nk)],
                    residual=p[f"tcn.{i}.residual"],
                    skip=p[f"tcn.{i}.skip"],
                )
            )
        return tp

    def mtcl_params(self) -> MtclParams:
        p = self.params
        return MtclParams(
            *(p[f"mtcl.{k}"] for k in ("n1", "n2", "w1", "w2", "wh1", "wh2", "wa")),
            alpha=self.config.alpha,
            attention_source=self.config.attention_source,
        )

    def uses_mtcl(self) -> bool:
        c = self.config
        return c.structure_mode == "mtcl" and c.ablation in ("full", "no_tcn")

    def uses_gsl(self) -> bool:
        c = self.config
        return c.ablation == "no_hyper" or (c.structure_mode == "gsl" and c.ablation in ("full", "no_tcn"))


def _uniform(rng, shape, fan_in):
    b = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)


def temporal_width(config: ModelConfig) -> int:
    if config.ablation == "no_tcn":
        return config.tcn.skip_channels
    t_out = config.window - required_length(config.tcn) + 1
    return config.tcn.skip_channels * t_out


def init_model(config: ModelConfig, n_nodes: int, rng: np.random.Generator | None = None) -> ModelState:
    if n_nodes < 2:
        raise ConfigError("need at least two features (graph nodes)")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    state = ModelState(config, n_nodes, params, buffers)

    if config.ablation == "no_tcn":
        params["notcn.w"] = _uniform(rng, (config.window, config.tcn.skip_channels), config.window)
        params["notcn.b"] = Tensor(np.zeros(config.tcn.skip_channels), requires_grad=True)
    else:
        params.update(init_tcn(config.tcn, rng).named())
        R, S = config.tcn.residual_channels, config.tcn.skip_channels
        params["temporal.skip_end"] = _uniform(rng, (S, R), R)

    if state.uses_mtcl():
        mt = init_mtcl(
            n_nodes, rng, config.embed_dim, config.hyperedges, alpha=config.alpha,
            attention_source=config.attention_source,
        )
        params.update({f"mtcl.{k}": v for k, v in mt.tensors().items()})
    if state.uses_gsl():
        params["gsl.embeddings"] = _uniform(rng, (n_nodes, config.embed_dim), config.embed_dim)
    if config.ablation == "no_gcn":
        params["spatial.mix"] = Tensor(
            np.eye(n_nodes) + rng.uniform(-0.1, 0.1, size=(n_nodes, n_nodes)), requires_grad=True
        )

    F0, G = temporal_width(config), config.spatial_channels
    params["spatial.w"] = _uniform(rng, (F0, G), F0)
    params["spatial.self"] = _uniform(rng, (F0, G), F0)

    width = G
    for i, h in enumerate(config.mlp_widths):
        params[f"mlp.{i}.w"] = _uniform(rng, (width, h), width)
        params[f"mlp.{i}.b"] = Tensor(np.zeros(h), requires_grad=True)
        params[f"mlp.{i}.gamma"] = Tensor(np.ones(h), requires_grad=True)
        params[f"mlp.{i}.beta"] = Tensor(np.zeros(h), requires_grad=True)
        buffers[f"mlp.{i}.running_mean"] = np.zeros(h)
        buffers[f"mlp.{i}.running_var"] = np.ones(h)
        width = h
    params["head.w"] = _uniform(rng, (width, 1), width)
    params["head.b"] = Tensor(np.zeros(1), requires_grad=True)
    return state


def spatial_structure(state: ModelState):
    """HypergraphStructure (MTCL / identity) or a GSL adjacency Tensor, or None for no_gcn."""
    c = state.config
    if c.ablation == "no_gcn":
        return None
    if c.ablation == "no_mtcl":
        return identity_structure(state.n_nodes)
    if state.uses_gsl():
        return gsl_adjacency(
            GslState(state.params["gsl.embeddings"], c.gsl_k, binary=c.ablation == "no_hyper")
        )
    return build_structure(state.mtcl_params())


def structure_laplacian(structure, n_nodes: int) -> np.ndarray:
    if isinstance(structure, HypergraphStructure):
        return structure.L.data
    if structure is None:
        return np.zeros((n_nodes, n_nodes))
    return np.eye(n_nodes) - normalized_adjacency(structure.data).data


def forward(
    inputs,
    state: ModelState,
    mode: str = "eval",
    mask_stage: str = "off",
    rng: np.random.Generator | None = None,
    structure=None,
) -> Tensor:
    """inputs (B, N, K) windows -> (B, N) predictions of the value h steps ahead."""
    c, p = state.config, state.params
    x = np.asarray(inputs.inputs if hasattr(inputs, "inputs") else inputs, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != state.n_nodes or x.shape[2] != c.window:
        raise DataError(
            f"expected windows of shape (B, {state.n_nodes}, {c.window}), got {x.shape}"
        )
    B, N, K = x.shape
    if structure is None:
        structure = spatial_structure(state)

    xt = Tensor(x[:, None])
    if mode == "train" and mask_stage != "off":
        if mask_stage == "laplacian":
            probs, weights = laplacian_mask_inputs(structure_laplacian(structure, N), c.mask, K)
        else:
            probs, weights = None, None
        mask = sample_mask(probs, weights, c.mask.base_ratio, mask_stage, rng, (B, 1, N, K))
        xt = apply_mask(xt, mask)

    if c.ablation == "no_tcn":
        z = nx.relu(xt.reshape(B, N, K) @ p["notcn.w"] + p["notcn.b"])
    else:
        h, skip = tcn_forward(xt, c.tcn, state.tcn_params())
        z = nx.relu(skip + conv1x1(h, p["temporal.skip_end"]))
        S, t_out = z.shape[1], z.shape[3]
        z = z.transpose(0, 2, 1, 3).reshape(B, N, S * t_out)

    if structure is None:
        spatial = nx.relu(nx.einsum("nm,bmf->bnf", p["spatial.mix"], z) @ p["spatial.w"])
    elif isinstance(structure, HypergraphStructure):
        spatial = hypergraph_conv(z, structure, p["spatial.w"])
    else:
        spatial = gcn_propagate(z, structure, p["spatial.w"])
    rep = spatial + z @ p["spatial.self"]

    r = rep.reshape(B * N, rep.shape[2])
    for i in range(len(c.mlp_widths)):
        r = r @ p[f"mlp.{i}.w"] + p[f"mlp.{i}.b"]
        r = nx.batch_norm(
            r,
            state.buffers[f"mlp.{i}.running_mean"],
            state.buffers[f"mlp.{i}.running_var"],
            p[f"mlp.{i}.gamma"],
            p[f"mlp.{i}.beta"],
            mode="train" if mode == "train" else "eval",
        )
        r = nx.relu(r)
    out = r @ p["head.w"] + p["head.b"]
    return out.reshape(B, N)


def loss(predictions, targets) -> Tensor:
    return nx.mse(predictions, targets)


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    n_nodes: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    feature_names: list[str] | None = None
    norm_state: NormalizationState | None = None

    @classmethod
    def from_state(cls, state: ModelState, **kw) -> "Checkpoint":
        return cls(
            state.config,
            state.n_nodes,
            {k: v.data.copy() for k, v in state.params.items()},
            {k: v.copy() for k, v in state.buffers.items()},
            **kw,
        )

    def to_state(self, trainable: bool = False) -> ModelState:
        return ModelState(
            self.config,
            self.n_nodes,
            {k: Tensor(v.copy(), requires_grad=trainable) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def save(self, path) -> Path:
        """Zip container: manifest.json + one raw little-endian float64 blob per array."""
        path = Path(path)
        manifest = {
            "format": "stgcn-hyper-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "n_nodes": self.n_nodes,
            "epoch": self.epoch,
            "loss_history": [float(v) for v in self.loss_history],
            "feature_names": self.feature_names,
            "norm_state": None if self.norm_state is None else json.loads(self.norm_state.to_json()),
            "arrays": [],
        }
        blobs = []
        for group, arrays in (("params", self.params), ("buffers", self.buffers)):
            for i, (name, arr) in enumerate(arrays.items()):
                fname = f"{group}/{i:04d}.bin"
                manifest["arrays"].append(
                    {"group": group, "name": name, "shape": list(arr.shape), "dtype": "<f8", "file": fname}
                )
                blobs.append((fname, np.ascontiguousarray(arr, dtype="<f8").tobytes()))
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for fname, payload in [("manifest.json", json.dumps(manifest, indent=1).encode())] + blobs:
                info = zipfile.ZipInfo(fname, date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, payload)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"checkpoint not found: {path}")
        try:
            with zipfile.ZipFile(path) as zf:
                manifest = json.loads(zf.read("manifest.json"))
                if manifest.get("format") != "stgcn-hyper-checkpoint":
                    raise DataError(f"{path} is not a checkpoint")
                if manifest["version"] > CHECKPOINT_VERSION:
                    raise DataError(f"checkpoint version {manifest['version']} is newer than supported")
                groups: dict[str, dict] = {"params": {}, "buffers": {}}
                for entry in manifest["arrays"]:
                    arr = np.frombuffer(zf.read(entry["file"]), dtype=entry["dtype"]).astype(np.float64)
                    groups[entry["group"]][entry["name"]] = arr.reshape(entry["shape"])
        except (zipfile.BadZipFile, KeyError) as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from None
        ns = manifest.get("norm_state")
        return cls(
            ModelConfig.from_dict(manifest["config"]),
            manifest["n_nodes"],
            groups["params"],
            groups["buffers"],
            manifest["epoch"],
            manifest["loss_history"],
            manifest.get("feature_names"),
            None if ns is None else NormalizationState.from_json(json.dumps(ns)),
        )


# -- training -----------------------------------------------------------------


def _clip_and_step(state: ModelState, velocity: dict, config: ModelConfig) -> None:
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in state.params.items()}
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    scale = 1.0
    if config.grad_clip and norm > config.grad_clip:
        scale = config.grad_clip / norm
    for k, t in state.params.items():
        v = velocity[k]
        v *= config.momentum
        v += grads[k] * scale
        t.data -= config.lr * v
        t.grad = None


def train(
    train_values: np.ndarray,
    config: ModelConfig,
    feature_names: list[str] | None = None,
    norm_state: NormalizationState | None = None,
    snapshot_dir=None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> Checkpoint:
    """Mini-batch SGD with momentum on the MSE of h-step predictions.

    The spatial structure is rebuilt from the current parameters every batch;
    the masking stage follows the epoch schedule.  When ``snapshot_dir`` is
    given, the Laplacian is written there after every epoch.
    """
    values = np.asarray(train_values, dtype=np.float64)
    T, N = values.shape
    if T < config.horizon + 1:
        raise ConfigError("training series too short for the horizon")
    rng = np.random.default_rng(config.seed)
    state = init_model(config, N, rng)
    mask_rng = np.random.default_rng([config.seed, config.mask.seed])
    velocity = {k: np.zeros_like(t.data) for k, t in state.params.items()}
    history: list[float] = []
    n_windows = T - config.horizon

    for epoch in range(config.epochs):
        stage = stage_for_epoch(epoch, config.mask, config.epochs)
        order = rng.permutation(n_windows)
        total = 0.0
        for b, batch in enumerate(iter_windows(values, config.window, config.horizon, config.batch_size, order)):
            try:
                pred = forward(batch.inputs, state, "train", stage, mask_rng)
                l = loss(pred, batch.targets)
                l.backward()
                _clip_and_step(state, velocity, config)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch + 1}, batch {b}: {exc}") from exc
            total += l.item() * len(batch)
        if not np.all(np.isfinite([t.data for t in state.params.values()][0])):
            raise NumericError(f"parameters became non-finite at epoch {epoch + 1}")
        history.append(total / n_windows)
        log.info("epoch %d stage=%s loss=%.6g", epoch + 1, stage, history[-1])
        if snapshot_dir is not None:
            snapshot_laplacian(
                structure_laplacian(spatial_structure(state), N), epoch + 1, snapshot_dir, feature_names
            )
        if on_epoch is not None:
            on_epoch(epoch + 1, history[-1])

    return Checkpoint.from_state(
        state,
        epoch=config.epochs,
        loss_history=history,
        feature_names=feature_names,
        norm_state=norm_state,
    )


def predict(
    values: np.ndarray,
    checkpoint: Checkpoint,
    batch_size: int = 512,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mask-free predictions for every window of ``values``.

    Returns (predictions, targets, target_indices); row i predicts
    ``values[target_indices[i]]``.  There are T - h rows.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != checkpoint.n_nodes:
        raise DataError(
            f"checkpoint expects {checkpoint.n_nodes} features, data has shape {values.shape}"
        )
    c = checkpoint.config
    state = checkpoint.to_state()
    structure = spatial_structure(state)
    batches = list(iter_windows(values, c.window, c.horizon, batch_size))

    def run(batch):
        return forward(batch.inputs, state, "eval", structure=structure).data

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, batches))
    else:
        outs = [run(b) for b in batches]
    preds = np.concatenate(outs, axis=0)
    targets = np.concatenate([b.targets for b in batches], axis=0)
    idx = np.concatenate([b.target_indices for b in batches])
    return preds, targets, idx
