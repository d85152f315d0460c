import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stgcn_hyper.detectors import (
    AnomalyReport,
    ErrorNormalizer,
    GmmDetector,
    SlidingWindowNormalizer,
    compute_errors,
    detect,
    gmm_fit,
    gmm_score,
    pca_fit,
    pca_score,
    threshold_select,
)
from stgcn_hyper.errors import ConfigError, DimensionError, ParameterError


def test_compute_errors_examples():
    t = np.random.default_rng(0).normal(size=(20, 3))
    norm = ErrorNormalizer(mean=np.array([0.1, -0.2, 0.3]), std=np.array([2.0, 1.0, 0.5]))
    em = compute_errors(t, t, norm)
    assert not em.raw.any()
    assert np.allclose(em.normalized, -norm.mean / norm.std)
    e = np.random.default_rng(1).normal(size=(20_000, 2))
    em = compute_errors(e, np.zeros_like(e))
    # sampling error of mean/std at n=2e4 is ~0.007 each; the std part scales with |e|
    assert np.all(np.abs(em.normalized - e) < 0.03 * (1 + np.abs(e)))
    const = np.column_stack([np.full(10, 3.0), np.arange(10.0)])
    em = compute_errors(const, np.zeros_like(const))
    assert np.isfinite(em.normalized).all()
    with pytest.raises(DimensionError):
        compute_errors(np.zeros((3, 2)), np.zeros((3, 3)))


def test_sliding_window_normalizer():
    e = np.concatenate([np.random.default_rng(2).normal(size=(200, 2)), np.full((5, 2), 50.0)])
    out = SlidingWindowNormalizer(window=100).fit(e[:200]).transform(e)
    assert out.shape == e.shape and np.isfinite(out).all()
    # first shifted step stands out relative to its recent history
    assert out[200].min() > 10


def test_pca_examples():
    rng = np.random.default_rng(3)
    rank1 = np.outer(rng.normal(size=300), [1.0, 2.0, -1.0])
    assert pca_fit(rank1).n_components == 1
    rank2 = rng.normal(size=(300, 2)) @ rng.normal(size=(2, 4))
    assert pca_fit(rank2, variance_target=1.0).n_components == 2
    iso = rng.normal(size=(50_000, 10))
    assert pca_fit(iso, 0.95).n_components == 9
    # automatic choice never keeps every direction, so residuals stay informative
    assert pca_fit(iso, 1.0).n_components == 9
    assert pca_fit(iso, 1.0).threshold > 1e-3


def test_pca_score_examples():
    rng = np.random.default_rng(4)
    e = rng.normal(size=(100, 4))
    full = pca_fit(e, n_components=4)
    assert np.abs(pca_score(rng.normal(size=(50, 4)) * 10, full)).max() < 1e-10
    xaxis = np.column_stack([rng.normal(size=200), np.zeros(200)])
    det = pca_fit(xaxis, n_components=1)
    pts = np.array([[3.0, 2.0], [-1.0, -0.5], [0.0, 0.0]])
    assert np.allclose(pca_score(pts, det), [2.0, 0.5, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_pca_score_invariant_within_subspace(seed, shift):
    rng = np.random.default_rng(seed)
    det = pca_fit(rng.normal(size=(100, 4)) * [3, 2, 1, 0.1], n_components=2)
    x = rng.normal(size=(5, 4))
    moved = x + shift * det.basis[:, 0]
    assert np.allclose(pca_score(x, det), pca_score(moved, det), atol=1e-9)


def test_gmm_k_selection():
    rng = np.random.default_rng(5)
    tight = rng.normal(size=(500, 2)) * 0.1
    assert gmm_fit(tight, k_max=4).n_components == 1
    two = np.concatenate([rng.normal(size=(300, 2)) * 0.3 + [5, 5], rng.normal(size=(300, 2)) * 0.3 - [5, 5]])
    det = gmm_fit(two, k_max=4)
    assert det.n_components == 2
    centers = det.means[np.argsort(det.means[:, 0])]
    assert np.allclose(centers, [[-5, -5], [5, 5]], atol=0.2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_gmm_em_invariants(seed, k):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(size=(80, 3)) + rng.normal(size=3) * 3 for _ in range(3)])
    det = gmm_fit(x, n_components=k, seed=seed)
    assert abs(det.weights.sum() - 1.0) < 1e-12
    assert (det.variances >= 1e-6).all()
    ll = np.array(det.log_likelihood)
    assert np.all(np.diff(ll) >= -1e-9 * np.maximum(1, np.abs(ll[:-1])))


def test_gmm_score_examples():
    det = GmmDetector(np.ones(1), np.zeros((1, 3)), np.ones((1, 3)))
    assert gmm_score(np.zeros((1, 3)), det)[0] < gmm_score(np.full((1, 3), 5.0), det)[0]
    dists = np.linspace(0, 10, 30)
    s = gmm_score(np.outer(dists, [0.6, 0.0, 0.8]), det)
    assert np.all(np.diff(s) > 0)
    det2 = GmmDetector(np.array([0.5, 0.5]), np.array([[0.0, 0.0], [4.0, 1.0]]), np.full((2, 2), 1e-6))
    comp = det2.component_log_density(np.array([[4.0, 1.0], [4.1, 1.0]]))
    assert comp[0, 1] > comp[1, 1]
    assert np.isfinite(gmm_score(np.full((1, 2), 1e3), det2)).all()


def test_gmm_f1_mode_needs_labels():
    x = np.random.default_rng(6).normal(size=(100, 2))
    with pytest.raises(ConfigError):
        gmm_fit(x, k_mode="f1", k_max=2)
    labels = np.zeros(100, bool)
    labels[:5] = True
    x[:5] += 6
    assert gmm_fit(x, k_mode="f1", k_max=3, labels=labels).n_components in (1, 2, 3)


def test_threshold_examples():
    assert threshold_select([1, 5, 3], "max") == 5
    assert threshold_select([1, 2, 3], "quantile:0.5") == 2
    assert threshold_select([4, 4, 4], ("quantile", 0.9)) == 4
    with pytest.raises(ParameterError):
        threshold_select([1.0], "median")
    with pytest.raises(ParameterError):
        threshold_select([], "max")


def test_max_threshold_never_flags_validation():
    rng = np.random.default_rng(7)
    v = rng.normal(size=(200, 3))
    for det, score in ((gmm_fit(v), gmm_score), (pca_fit(v), pca_score)):
        assert not (score(v, det) > det.threshold).any()


def test_detect_examples(tmp_path):
    r = detect([0.1, 0.5, 0.2], 0.5)
    assert not r.flags.any()
    r = detect([0.1, 0.9, 0.2], 0.5, np.array([[1, 2, 3], [0, 3, 1], [0, 0, 0]]))
    assert r.flags.tolist() == [False, True, False]
    assert r.top_feature.tolist() == [-1, 1, -1]
    r.feature_names = ["a", "b", "c"]
    r.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "timestep,score,threshold,flag,top_feature"
    assert lines[2].endswith(",1,b")
    back = AnomalyReport.from_csv(tmp_path / "r.csv")
    assert np.array_equal(back.scores, r.scores) and np.array_equal(back.flags, r.flags)
    r.to_json(tmp_path / "r.json")
    assert '"n_anomalies": 1' in (tmp_path / "r.json").read_text()
