"""Dilated-inception temporal convolution blocks with gated fusion.

Each layer runs parallel causal convolutions with several kernel sizes at a
shared dilation (filter branch and gate branch), fuses them as
``tanh(filter) * sigmoid(gate)``, adds a 1x1-projected residual and emits a
1x1-projected skip contribution.  Tensors are laid out (B, C, N, T).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor


@dataclass
class TcnConfig:
    layers: int = 2
    kernel_sizes: tuple[int, ...] = (2, 3, 6, 7)
    dilation_exponential: float = 1.0
    in_channels: int = 1
    conv_channels: int = 32
    residual_channels: int = 32
    skip_channels: int = 64

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if not self.kernel_sizes or min(self.kernel_sizes) < 1:
            raise ConfigError("kernel_sizes must be a nonempty list of sizes >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.dilation_exponential < 1:
            raise ConfigError("dilation_exponential must be >= 1")
        if self.conv_channels % len(self.kernel_sizes):
            raise ConfigError("conv_channels must be divisible by the number of kernel sizes")


@dataclass
class TcnLayerParams:
    filter_kernels: list[Tensor]  # one (c, R, k) per kernel size
    filter_biases: list[Tensor]
    gate_kernels: list[Tensor]
    gate_biases: list[Tensor]
    residual: Tensor  # (R, conv)
    skip: Tensor  # (S, conv)


@dataclass
class TcnParams:
    start: Tensor  # (R, in)
    start_bias: Tensor  # (R,)
    layers: list[TcnLayerParams] = field(default_factory=list)

    def named(self) -> dict[str, Tensor]:
        out = {"tcn.start": self.start, "tcn.start_bias": self.start_bias}
        for i, lp in enumerate(self.layers):
            for j in range(len(lp.filter_kernels)):
                out[f"tcn.{i}.filter{j}"] = lp.filter_kernels[j]
                out[f"tcn.{i}.filter{j}_bias"] = lp.filter_biases[j]
                out[f"tcn.{i}.gate{j}"] = lp.gate_kernels[j]
                out[f"tcn.{i}.gate{j}_bias"] = lp.gate_biases[j]
            out[f"tcn.{i}.residual"] = lp.residual
            out[f"tcn.{i}.skip"] = lp.skip
        return out


def receptive_field(kernel_size: int, layers: int, dilation_exponential: float) -> float:
    """Receptive-field formula as printed for the dilation schedule.

    For DE > 1 this is ``1 + (k-1) * DE**(layers-1) / (DE-1)``, which is not the
    geometric-series span of the stacked convolutions; see `required_length`.
    """
    k, de = kernel_size, dilation_exponential
    if de > 1:
        return 1 + (k - 1) * de ** (layers - 1) / (de - 1)
    return layers * (k - 1) + 1


def dilation_schedule(config: TcnConfig) -> list[int]:
    de = config.dilation_exponential
    return [max(1, int(round(de**i))) for i in range(config.layers)]


def required_length(config: TcnConfig) -> int:
    """Shortest window the stacked convolutions accept (their true receptive field)."""
    kmax = max(config.kernel_sizes)
    return 1 + (kmax - 1) * sum(dilation_schedule(config))


def init_tcn(config: TcnConfig, rng: np.random.Generator, zero: bool = False) -> TcnParams:
    R, S, C = config.residual_channels, config.skip_channels, config.conv_channels
    per = C // len(config.kernel_sizes)

    def w(*shape, fan_in):
        if zero:
            return Tensor(np.zeros(shape), requires_grad=True)
        b = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-b, b, size=shape), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    params = TcnParams(start=w(R, config.in_channels, fan_in=config.in_channels), start_bias=zeros(R))
    for _ in range(config.layers):
        params.layers.append(
            TcnLayerParams(
                filter_kernels=[w(per, R, k, fan_in=R * k) for k in config.kernel_sizes],
                filter_biases=[zeros(per) for _ in config.kernel_sizes],
                gate_kernels=[w(per, R, k, fan_in=R * k) for k in config.kernel_sizes],
                gate_biases=[zeros(per) for _ in config.kernel_sizes],
                residual=w(R, C, fan_in=C),
                skip=w(S, C, fan_in=C),
            )
        )
    return params


def conv1x1(x: Tensor, w, bias=None) -> Tensor:
    out = nx.einsum("oc,bcnt->bont", w, x)
    if bias is not None:
        out = out + nx.as_tensor(bias).reshape(1, -1, 1, 1)
    return out


def _stack_kernels(kernels, biases):
    """Zero-pad every kernel at its oldest taps and stack them on the output axis.

    The padded kernel reproduces the shorter kernel's output cropped to the
    shortest branch length, so all branches run as one convolution.
    """
    kmax = max(k.shape[2] for k in kernels)
    padded = []
    for w in kernels:
        k = w.shape[2]
        if k < kmax:
            w = nx.concat([w, Tensor(np.zeros(w.shape[:2] + (kmax - k,)))], axis=2)
        padded.append(w)
    weight = padded[0] if len(padded) == 1 else nx.concat(padded, axis=0)
    if biases is None or any(b is None for b in biases):
        return weight, None
    bias = biases[0] if len(biases) == 1 else nx.concat(list(biases), axis=0)
    return weight, bias


def dilated_inception(x, kernels, biases=None, dilation: int = 1) -> Tensor:
    """Parallel causal convolutions, left-cropped to the shortest branch, concatenated on channels."""
    x = nx.as_tensor(x)
    kmax = max(k.shape[2] for k in kernels)
    if x.shape[3] - (kmax - 1) * dilation < 1:
        raise ConfigError(
            f"window of {x.shape[3]} steps too short for kernel {kmax} at dilation {dilation}; "
            f"needs at least {(kmax - 1) * dilation + 1}"
        )
    weight, bias = _stack_kernels(list(kernels), biases)
    return nx.temporal_conv(x, weight, dilation, bias)


def gated_fusion(filter_out, gate_out) -> Tensor:
    filter_out, gate_out = nx.as_tensor(filter_out), nx.as_tensor(gate_out)
    if filter_out.shape != gate_out.shape:
        raise DimensionError(f"filter {filter_out.shape} and gate {gate_out.shape} shapes differ")
    return nx.tanh(filter_out) * nx.sigmoid(gate_out)


def residual_step(layer_in, fused, w_res) -> Tensor:
    fused = nx.as_tensor(fused)
    layer_in = nx.as_tensor(layer_in)
    t = fused.shape[3]
    return conv1x1(fused, w_res) + layer_in[..., layer_in.shape[3] - t :]


def skip_collect(fused_list, skip_weights) -> Tensor:
    if not fused_list:
        raise ConfigError("skip_collect needs at least one layer output")
    t_final = min(f.shape[3] for f in fused_list)
    total = None
    for fused, w in zip(fused_list, skip_weights):
        proj = conv1x1(fused, w)
        proj = proj[..., proj.shape[3] - t_final :]
        total = proj if total is None else total + proj
    return total


def tcn_forward(x, config: TcnConfig, params: TcnParams) -> tuple[Tensor, Tensor]:
    """x: (B, in, N, T) -> (features (B, R, N, T'), skip_sum (B, S, N, T'))."""
    x = nx.as_tensor(x)
    need = required_length(config)
    if x.shape[3] < need:
        raise ConfigError(
            f"window length {x.shape[3]} is shorter than the receptive field {need}"
        )
    h = conv1x1(x, params.start, params.start_bias)
    fused_list = []
    for lp, d in zip(params.layers, dilation_schedule(config)):
        # filter and gate branches share the input: run them as one convolution
        both = dilated_inception(
            h, lp.filter_kernels + lp.gate_kernels, lp.filter_biases + lp.gate_biases, d
        )
        c = both.shape[1] // 2
        fused = gated_fusion(both[:, :c], both[:, c:])
        fused_list.append(fused)
        h = residual_step(h, fused, lp.residual)
    skip = skip_collect(fused_list, [lp.skip for lp in params.layers])
    return h, skip
