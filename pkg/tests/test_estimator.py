import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from diffstg import DiffSTGForecaster
from diffstg.data import SyntheticSpec, generate_synthetic
from diffstg.graph import ring_graph

FAST = dict(T_h=4, T_p=4, C=8, N=10, max_epochs=1, steps_per_epoch=5, S=4, random_state=0)


@pytest.fixture(scope="module")
def series():
    return generate_synthetic(SyntheticSpec(V=4, length=400), seed=0).signals[..., 0]


@pytest.fixture(scope="module")
def fitted(series):
    return DiffSTGForecaster(adjacency=ring_graph(4), **FAST).fit(series)


def test_params_roundtrip_and_clone():
    est = DiffSTGForecaster(adjacency=ring_graph(3), C=8, k=2)
    params = est.get_params()
    assert params["C"] == 8 and params["k"] == 2
    twin = clone(est)
    assert twin.get_params()["C"] == 8 and not hasattr(twin, "model_")
    assert est.set_params(S=16).S == 16


def test_not_fitted():
    with pytest.raises(NotFittedError):
        DiffSTGForecaster(adjacency=ring_graph(2)).predict(np.zeros((1, 12, 2)))


def test_fit_sets_attributes(fitted):
    assert fitted.n_features_in_ == 4 and fitted.squeeze_
    assert len(fitted.history_) == 1 and np.isfinite(fitted.best_val_crps_)


def test_predict_and_sample_shapes(fitted, series):
    hist = np.stack([series[i:i + 4] for i in (300, 310, 320)])
    assert fitted.sample(hist).shape == (4, 3, 4, 4)
    pred = fitted.predict(hist)
    assert pred.shape == (3, 4, 4) and np.all(np.isfinite(pred))
    assert fitted.predict(series[300:304]).shape == (1, 4, 4)


def test_sampling_is_seeded(fitted, series):
    hist = series[None, 300:304]
    np.testing.assert_array_equal(fitted.sample(hist, seed=5), fitted.sample(hist, seed=5))
    assert not np.array_equal(fitted.sample(hist, seed=5), fitted.sample(hist, seed=6))


def test_score_is_negative_crps(fitted, series):
    hist = np.stack([series[i:i + 4] for i in (300, 320)])
    y = np.stack([series[i + 4:i + 8] for i in (300, 320)])
    s = fitted.score(hist, y)
    assert s < 0 and np.isfinite(s)


def test_multifeature_input():
    X = np.random.default_rng(0).normal(size=(200, 3, 2))
    est = DiffSTGForecaster(adjacency=ring_graph(3), **FAST).fit(X)
    assert est.sample(X[None, 150:154]).shape == (4, 1, 4, 3, 2)


def test_adjacency_mismatch(series):
    with pytest.raises(ValueError, match="3 nodes but X has 4"):
        DiffSTGForecaster(adjacency=ring_graph(3), **FAST).fit(series)


def test_missing_adjacency(series):
    with pytest.raises(ValueError, match="adjacency is required"):
        DiffSTGForecaster(**FAST).fit(series)


def test_bad_history(fitted, series):
    with pytest.raises(ValueError, match="history windows"):
        fitted.predict(series[None, :5])
    hist = series[None, 300:304].copy()
    hist[0, 1, 2] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        fitted.predict(hist)
