import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stgcn_hyper import numerics as nx
from stgcn_hyper.errors import ConfigError, DimensionError
from stgcn_hyper.numerics import Tensor
from stgcn_hyper.tcn import (
    TcnConfig,
    dilated_inception,
    dilation_schedule,
    gated_fusion,
    init_tcn,
    receptive_field,
    required_length,
    residual_step,
    skip_collect,
    tcn_forward,
)


def test_receptive_field_examples():
    assert receptive_field(7, 3, 1.0) == 19
    assert receptive_field(7, 3, 2.0) == 25
    assert receptive_field(2, 1, 1.0) == 2


def test_dilation_schedule_and_required_length():
    assert dilation_schedule(TcnConfig(layers=3, dilation_exponential=2.0)) == [1, 2, 4]
    cfg = TcnConfig(layers=3, kernel_sizes=(7,), conv_channels=4, dilation_exponential=2.0)
    assert required_length(cfg) == 1 + 6 * 7
    assert required_length(TcnConfig(layers=3, kernel_sizes=(7,), conv_channels=4)) == 19


def test_inception_constant_input_averaging_kernels():
    x = Tensor(np.full((1, 2, 3, 12), 4.0))
    kernels = [Tensor(np.full((1, 2, k), 1.0 / (2 * k))) for k in (2, 3, 6, 7)]
    out = dilated_inception(x, kernels, dilation=1).data
    assert out.shape == (1, 4, 3, 6)
    assert np.allclose(out, 4.0)


def test_inception_first_difference_on_ramp():
    x = Tensor(np.arange(10.0).reshape(1, 1, 1, 10))
    out = dilated_inception(x, [Tensor(np.array([[[1.0, -1.0]]]))], dilation=1).data
    assert np.array_equal(out[0, 0, 0], np.ones(9))


def test_inception_too_short_raises():
    x = Tensor(np.zeros((1, 1, 1, 12)))
    with pytest.raises(ConfigError):
        dilated_inception(x, [Tensor(np.zeros((1, 1, 7)))], dilation=2)


def test_inception_equals_separate_cropped_branches():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 2, 15)))
    ks = [Tensor(rng.normal(size=(2, 3, k))) for k in (2, 3, 6, 7)]
    bs = [Tensor(rng.normal(size=2)) for _ in ks]
    out = dilated_inception(x, ks, bs, dilation=2).data
    t_out = out.shape[3]
    parts = [nx.temporal_conv(x, k, 2, b).data[..., -t_out:] for k, b in zip(ks, bs)]
    assert np.allclose(out, np.concatenate(parts, axis=1), atol=1e-12)


def test_gated_fusion_examples():
    f = np.random.default_rng(1).normal(size=(2, 3))
    assert np.allclose(gated_fusion(f, np.zeros((2, 3))).data, 0.5 * np.tanh(f))
    assert np.allclose(gated_fusion(f, np.full((2, 3), -60.0)).data, 0.0, atol=1e-20)
    assert not gated_fusion(np.zeros((2, 3)), f).data.any()
    with pytest.raises(DimensionError):
        gated_fusion(np.zeros((2, 3)), np.zeros((3, 2)))


def test_residual_and_skip_examples():
    rng = np.random.default_rng(2)
    layer_in = rng.normal(size=(1, 2, 1, 6))
    w = np.eye(2)
    assert np.array_equal(residual_step(layer_in, np.zeros((1, 2, 1, 4)), w).data, layer_in[..., 2:])
    f = rng.normal(size=(1, 2, 1, 4))
    assert np.allclose(residual_step(np.zeros((1, 2, 1, 6)), f, w).data, f)
    assert not residual_step(np.zeros((1, 2, 1, 6)), np.zeros((1, 2, 1, 4)), w).data.any()
    ws = rng.normal(size=(3, 2))
    one = skip_collect([Tensor(f)], [ws]).data
    assert np.allclose(one, np.einsum("oc,bcnt->bont", ws, f))
    assert not skip_collect([Tensor(f)], [np.zeros((3, 2))]).data.any()
    two = skip_collect([Tensor(f), Tensor(f)], [np.eye(2), np.eye(2)]).data
    assert np.allclose(two, 2 * f)


def test_zero_kernels_constant_input_give_zero_features():
    cfg = TcnConfig(layers=2, conv_channels=8, residual_channels=4, skip_channels=4)
    params = init_tcn(cfg, np.random.default_rng(0), zero=True)
    h, skip = tcn_forward(np.full((2, 1, 3, 16), 0.7), cfg, params)
    assert not h.data.any() and not skip.data.any()


def test_tcn_determinism():
    cfg = TcnConfig(conv_channels=8, residual_channels=4, skip_channels=4)
    x = np.random.default_rng(5).normal(size=(2, 1, 3, 16))
    a = tcn_forward(x, cfg, init_tcn(cfg, np.random.default_rng(9)))
    b = tcn_forward(x, cfg, init_tcn(cfg, np.random.default_rng(9)))
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_window_shorter_than_receptive_field_raises():
    cfg = TcnConfig(layers=2, conv_channels=8)
    with pytest.raises(ConfigError):
        tcn_forward(np.zeros((1, 1, 2, required_length(cfg) - 1)), cfg, init_tcn(cfg, np.random.default_rng(0)))


def earliest_influential_lag(cfg: TcnConfig, T: int, seed: int = 0) -> int:
    """Largest lag (steps before the newest input) whose perturbation moves the newest output."""
    params = init_tcn(cfg, np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1).normal(size=(1, 1, 1, T))
    base = tcn_forward(x, cfg, params)[1].data[..., -1]
    lags = []
    for lag in range(T):
        y = x.copy()
        y[..., T - 1 - lag] += 1.0
        if np.any(tcn_forward(y, cfg, params)[1].data[..., -1] != base):
            lags.append(lag)
    return max(lags)


@settings(max_examples=12, deadline=None)
@given(st.sampled_from([2, 3, 6, 7]), st.integers(1, 3), st.integers(0, 1000))
def test_receptive_field_probe(k, layers, seed):
    cfg = TcnConfig(layers=layers, kernel_sizes=(k,), conv_channels=2, residual_channels=2, skip_channels=2)
    rf = int(receptive_field(k, layers, 1.0))
    assert earliest_influential_lag(cfg, rf + 5, seed) == rf - 1


def test_tcn_grad_check():
    cfg = TcnConfig(layers=2, kernel_sizes=(2, 3), conv_channels=4, residual_channels=3, skip_channels=2)
    rng = np.random.default_rng(11)
    params = init_tcn(cfg, rng)
    named = params.named()
    x = Tensor(rng.normal(size=(2, 1, 2, 8)))
    weights = rng.normal(size=(2, 2, 2, 4))

    def f(*ts):
        p = dict(zip(named, ts))
        from stgcn_hyper.tcn import TcnLayerParams, TcnParams

        tp = TcnParams(p["tcn.start"], p["tcn.start_bias"])
        for i in range(cfg.layers):
            tp.layers.append(
                TcnLayerParams(
                    [p[f"tcn.{i}.filter{j}"] for j in range(2)],
                    [p[f"tcn.{i}.filter{j}_bias"] for j in range(2)],
                    [p[f"tcn.{i}.gate{j}"] for j in range(2)],
                    [p[f"tcn.{i}.gate{j}_bias"] for j in range(2)],
                    p[f"tcn.{i}.residual"],
                    p[f"tcn.{i}.skip"],
                )
            )
        h, skip = tcn_forward(x, cfg, tp)
        return (skip * weights).sum() + (h * h).mean()

    assert nx.grad_check(f, list(named.values())) < 1e-4
