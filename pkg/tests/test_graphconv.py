import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stgcn_hyper import numerics as nx
from stgcn_hyper.errors import ParameterError
from stgcn_hyper.graphconv import (
    GslState,
    build_adjacency,
    gcn_propagate,
    gsl_adjacency,
    hypergraph_conv,
    normalized_adjacency,
    residual_correlation,
    snapshot_adjacency,
    topk_select,
)
from stgcn_hyper.hypergraph import build_structure, degrees, identity_structure, init_mtcl, load_matrix_csv
from stgcn_hyper.numerics import Tensor


def test_hypergraph_conv_examples():
    x = np.abs(np.random.default_rng(0).normal(size=(3, 2)))
    assert np.allclose(hypergraph_conv(x, identity_structure(3), np.eye(2)).data, x)
    H = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
    dv, de = degrees(H)
    theta = (H / np.sqrt(dv.data)[:, None]) @ np.diag(1 / de.data) @ (H / np.sqrt(dv.data)[:, None]).T
    out = hypergraph_conv(np.array([[1.0], [0.0]]), theta, np.array([[1.0]])).data
    assert np.allclose(out, [[0.75], [0.25]], atol=1e-12)
    assert not hypergraph_conv(np.zeros((3, 2)), identity_structure(3), np.ones((2, 4))).data.any()


def test_correlation_examples():
    e = np.array([[1.0, 2.0], [1.0, 2.0], [-2.0, 1.0], [-1.0, -2.0]])
    c = residual_correlation(e).data
    assert c[0, 1] == pytest.approx(1.0)
    assert c[0, 2] == pytest.approx(0.0, abs=1e-12)
    assert c[0, 3] == pytest.approx(-1.0)


def test_topk_examples():
    c = np.array([[1.0, 0.9, 0.1, 0.5]] + [[0.0] * 4] * 3)
    assert set(topk_select(c, 2)[0]) == {1, 3}
    assert set(topk_select(np.eye(4), 3)[2]) == {0, 1, 3}
    assert topk_select(np.ones((4, 4)), 1)[:, 0].tolist() == [1, 0, 0, 0]
    with pytest.raises(ParameterError):
        topk_select(np.ones((3, 3)), 0)
    with pytest.raises(ParameterError):
        topk_select(np.ones((3, 3)), 3)


def test_adjacency_examples():
    neg = -np.ones((3, 3))
    assert np.array_equal(build_adjacency(neg, topk_select(neg, 2)).data, np.eye(3))
    c = np.array([[1.0, 0.8, 0.1], [0.8, 1.0, 0.2], [0.1, 0.2, 1.0]])
    a = build_adjacency(c, topk_select(c, 1)).data
    assert a[0, 1] == a[1, 0] == 0.8
    b = build_adjacency(c, topk_select(c, 1), binary=True).data
    assert set(np.unique(b)) <= {0.0, 1.0}


def test_gcn_examples():
    x = np.abs(np.random.default_rng(1).normal(size=(3, 2)))
    assert np.allclose(gcn_propagate(x, np.eye(3), np.eye(2)).data, x)
    const = np.full((2, 3), 0.4)
    assert np.allclose(gcn_propagate(const, np.ones((2, 2)), np.eye(3)).data, const)
    assert not gcn_propagate(np.zeros((3, 2)), np.eye(3), np.ones((2, 2))).data.any()


def _dense_hyper(x, H, W):
    dv = H.sum(1)
    de = np.maximum(H.sum(0), 1e-8)
    inv = np.diag(dv ** -0.5)
    return np.maximum(inv @ H @ np.linalg.inv(np.diag(de)) @ H.T @ inv @ x @ W, 0)


def _dense_gcn(x, A, W):
    inv = np.diag(A.sum(1) ** -0.5)
    return np.maximum(inv @ A @ inv @ x @ W, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_operators_match_dense_chain(n, f, seed):
    rng = np.random.default_rng(seed)
    s = build_structure(init_mtcl(n, rng, 3))
    x, w = rng.normal(size=(n, f)), rng.normal(size=(f, 3))
    assert np.allclose(hypergraph_conv(x, s, w).data, _dense_hyper(x, s.H.data, w), atol=1e-10, rtol=0)
    A = gsl_adjacency(GslState(Tensor(rng.normal(size=(n, 3))), k=max(1, n // 2))).data
    assert np.allclose(gcn_propagate(x, A, w).data, _dense_gcn(x, A, w), atol=1e-10, rtol=0)
    # batched inputs agree row by row
    xb = rng.normal(size=(2, n, f))
    out = hypergraph_conv(xb, s, w).data
    assert np.allclose(out[1], _dense_hyper(xb[1], s.H.data, w), atol=1e-10, rtol=0)


def test_normalized_adjacency_rejects_isolated_node():
    with pytest.raises(ParameterError):
        normalized_adjacency(np.zeros((2, 2)))


def test_gcn_and_gsl_grad_check():
    rng = np.random.default_rng(4)
    e, x, w = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(2, 3)))

    def f(ee, xx, ww):
        return (gcn_propagate(xx, gsl_adjacency(GslState(ee, 2)), ww) ** 2).sum()

    assert nx.grad_check(f, [e, x, w]) < 1e-4


def test_snapshot_adjacency(tmp_path):
    a = np.eye(3) * 0.5
    path = snapshot_adjacency(a, 2, tmp_path)
    assert path.name == "adjacency_epoch2.csv"
    assert np.array_equal(load_matrix_csv(path)[1], a)
