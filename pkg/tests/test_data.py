import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from diffstg.data import (GaussianOracle, NodeScaler, STGDataset, SyntheticSpec, chronological_split, destandardize,
                          generate_synthetic, load_csv, make_windows, persistence_ensemble, read_oracle_csv,
                          window_batch, window_starts, write_oracle_csv, write_signals_csv, write_synthetic)
from diffstg.graph import Graph, ring_graph, write_adjacency_csv


def _write(tmp_path, signals_text, V):
    (tmp_path / "s.csv").write_text(signals_text)
    write_adjacency_csv(ring_graph(V), tmp_path / "a.csv")
    return tmp_path / "s.csv", tmp_path / "a.csv"


# -- CSV ingestion ---------------------------------------------------------------------

def test_load_small_csv(tmp_path):
    ds = load_csv(*_write(tmp_path, "0,1\n1.0,2.0\n3.0,4.0\n5.0,6.0\n", 2))
    assert (ds.T_total, ds.V, ds.F) == (3, 2, 1)
    np.testing.assert_array_equal(ds.signals[:, :, 0], [[1, 2], [3, 4], [5, 6]])


def test_node_count_mismatch(tmp_path):
    with pytest.raises(ValueError, match="3 node columns.*2 nodes"):
        load_csv(*_write(tmp_path, "a,b,c\n1,2,3\n", 2))


@pytest.mark.parametrize("bad", ["", "nan", "x"])
def test_missing_value_reports_location(tmp_path, bad):
    with pytest.raises(ValueError, match="row 1, column 1"):
        load_csv(*_write(tmp_path, f"0,1\n1,2\n3,{bad}\n", 2))


def test_signals_csv_roundtrip(tmp_path):
    x = np.random.default_rng(0).standard_normal((20, 3))
    write_signals_csv(x, tmp_path / "s.csv")
    write_adjacency_csv(ring_graph(3), tmp_path / "a.csv")
    np.testing.assert_array_equal(load_csv(tmp_path / "s.csv", tmp_path / "a.csv").signals[..., 0], x)


def test_dataset_rejects_nan():
    x = np.zeros((5, 2))
    x[3, 1] = np.nan
    with pytest.raises(ValueError, match="row 3, node 1"):
        STGDataset(x, ring_graph(2))


# -- splitting and windows -----------------------------------------------------------------

def test_split_arithmetic():
    train, val, test = chronological_split(100, window=12)
    assert (train, val, test) == (range(0, 60), range(60, 80), range(80, 100))


def test_split_too_small():
    with pytest.raises(ValueError, match="val split has 20 rows"):
        chronological_split(100, window=24)


def test_train_window_boundary():
    starts = window_starts(range(0, 60), 24)
    assert 55 not in starts and starts[-1] == 36
    assert len(starts) == 60 - 24 + 1


@settings(max_examples=40, deadline=None)
@given(T_total=st.integers(120, 5000), T=st.integers(2, 24), stride=st.integers(1, 5))
def test_windows_stay_inside_their_split(T_total, T, stride):
    for part in chronological_split(T_total, window=T):
        s = window_starts(part, T, stride)
        assert s.min() >= part.start and s.max() + T <= part.stop
        assert len(s) == (len(part) - T) // stride + 1


def _dataset(T_total=200, V=3, seed=0):
    return STGDataset(np.random.default_rng(seed).normal(5, 3, (T_total, V)), ring_graph(V))


def test_constant_series_standardizes_to_zero():
    ds = STGDataset(np.full((100, 2), 7.0), ring_graph(2))
    ds.fit_scaler(range(0, 60))
    batch, _ = window_batch(ds, range(0, 60), 4, 4)
    assert np.all(batch.x_all == 0)


def test_mask_and_inverse_standardization():
    ds = _dataset()
    train, _, _ = chronological_split(ds.T_total, window=24)
    ds.fit_scaler(train)
    windows = make_windows(ds, train, 12, 12, stride=7)
    for w in windows:
        assert np.all(w.mask.sum(axis=1) == 12)
        raw = destandardize(w.x_all, w.norm_stats)
        np.testing.assert_allclose(raw[0].T, ds.signals[w.start:w.start + 24, :, 0], atol=1e-6)


def test_no_leakage_from_val_and_test():
    ds = _dataset()
    train, val, test = chronological_split(ds.T_total, window=24)
    ds.fit_scaler(train)
    stats = [a.copy() for a in ds.norm_stats]
    altered = ds.signals.copy()
    altered[val.start:] = 1e6
    ds2 = STGDataset(altered, ds.graph)
    ds2.fit_scaler(train)
    for a, b in zip(stats, ds2.norm_stats):
        np.testing.assert_array_equal(a, b)


def test_windowing_is_pure():
    ds = _dataset()
    ds.fit_scaler(range(0, 120))
    a, sa = window_batch(ds, range(120, 200), 12, 12, stride=3)
    b, sb = window_batch(ds, range(120, 200), 12, 12, stride=3)
    assert a.x_all.tobytes() == b.x_all.tobytes() and np.array_equal(sa, sb)


def test_window_batch_needs_scaler_and_valid_starts():
    ds = _dataset()
    with pytest.raises(RuntimeError, match="fit_scaler"):
        window_batch(ds, range(0, 100))
    ds.fit_scaler(range(0, 100))
    with pytest.raises(IndexError):
        window_batch(ds, range(0, 100), starts=[90])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3)))
def test_scaler_roundtrip(X):
    sc = NodeScaler().fit(X)
    np.testing.assert_allclose(sc.inverse_transform(sc.transform(X)), X, atol=1e-6)


def test_scaler_is_an_sklearn_transformer():
    X = np.random.default_rng(0).standard_normal((50, 4))
    Z = clone(NodeScaler()).fit_transform(X)
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(Z.std(axis=0), 1, atol=1e-12)


# -- synthetic process and oracle ----------------------------------------------------------

def test_independent_nodes_have_ar1_variance():
    spec = SyntheticSpec(V=4, rho=0.9, lam=0.0, noise=0.7, length=50_000)
    x = generate_synthetic(spec, seed=3).signals[..., 0]
    expect = 0.7 ** 2 / (1 - 0.9 ** 2)
    assert np.all(np.abs(x.var(axis=0) / expect - 1) < 0.05)


def test_white_noise_limit():
    x = generate_synthetic(SyntheticSpec(V=3, rho=0.0, length=50_000), seed=1).signals[..., 0]
    r1 = np.array([np.corrcoef(x[:-1, v], x[1:, v])[0, 1] for v in range(3)])
    assert np.all(np.abs(r1) < 0.02)


def test_synthetic_determinism():
    a = generate_synthetic(SyntheticSpec(length=500), seed=7).signals
    b = generate_synthetic(SyntheticSpec(length=500), seed=7).signals
    c = generate_synthetic(SyntheticSpec(length=500), seed=8).signals
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


@pytest.mark.parametrize("kw", [{"rho": 1.0}, {"rho": 1.3}, {"rho": -0.1}, {"lam": 1.0}, {"noise": 0.0}])
def test_invalid_synthetic_spec(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


def test_oracle_matches_simulation():
    spec = SyntheticSpec(V=4, rho=0.9, lam=0.4)
    oracle = GaussianOracle(spec.transition(), spec.noise)
    x_last = np.array([1.0, -2.0, 0.5, 3.0])
    mean, std = oracle.marginals(x_last, 3)
    r = np.random.default_rng(0)
    n = 20_000
    x = np.tile(x_last, (n, 1))
    M = spec.transition()
    for h in range(3):
        x = x @ M.T + r.standard_normal(x.shape)
        se = std[h] / np.sqrt(n)
        assert np.all(np.abs(x.mean(axis=0) - mean[h]) < 4 * se)
        assert np.all(np.abs(x.std(axis=0) / std[h] - 1) < 0.03)


def test_oracle_first_step():
    M = SyntheticSpec(V=3).transition()
    mean, std = GaussianOracle(M, 2.0).marginals(np.ones(3), 1)
    np.testing.assert_allclose(mean[0], M @ np.ones(3))
    np.testing.assert_allclose(std[0], 2.0)


def test_oracle_csv_roundtrip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(V=3, length=60), seed=0)
    write_oracle_csv(ds, tmp_path / "o.csv", T_p=4)
    t, mean, std = read_oracle_csv(tmp_path / "o.csv")
    m_ref, s_ref = ds.oracle.marginals(ds.signals[t, :, 0], 4)
    assert t[0] == 0 and t[-1] == 55
    np.testing.assert_allclose(mean, m_ref, rtol=1e-9)
    np.testing.assert_allclose(std, s_ref, rtol=1e-9)


def test_write_synthetic_files(tmp_path):
    ds = generate_synthetic(SyntheticSpec(V=3, length=100), seed=0)
    paths = write_synthetic(ds, tmp_path)
    back = load_csv(paths["signals"], paths["adjacency"])
    np.testing.assert_array_equal(back.signals, ds.signals)
    np.testing.assert_array_equal(back.graph.A, ds.graph.A)


def test_ring_adjacency_written_without_coupling(tmp_path):
    ds = generate_synthetic(SyntheticSpec(V=4, lam=0.0, length=100), seed=0)
    paths = write_synthetic(ds, tmp_path)
    assert np.array_equal(load_csv(paths["signals"], paths["adjacency"]).graph.A, ring_graph(4).A)
    _, std = ds.oracle.marginals(np.zeros(4), 3)
    np.testing.assert_allclose(std[:, 0], np.sqrt(np.cumsum(0.81 ** np.arange(3))))


# -- persistence baseline ------------------------------------------------------------------

def test_persistence_ensemble_shape_and_anchor():
    ds = _dataset(V=2)
    ds.fit_scaler(range(0, 120))
    batch, _ = window_batch(ds, range(120, 200), 6, 4, stride=5)
    z = ds.scaler.transform(ds.signals[:120])
    ens = persistence_ensemble(batch, z, 6, S=16, rng=np.random.default_rng(0))
    assert ens.shape == (16,) + batch.x_all.shape[:3] + (4,)
    # a residual path is an actual training increment, so it is bounded by the training range
    last = batch.x_all[..., 5]
    spread = z.max() - z.min()
    assert np.all(np.abs(ens - last[None, ..., None]) <= spread + 1e-12)
