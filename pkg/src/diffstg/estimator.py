"""scikit-learn style wrapper around training and ensemble sampling."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import STGDataset, destandardize
from .diffusion import SamplerConfig, WindowBatch, sample_ensembles
from .graph import Graph
from .metrics import crps_empirical
from .schedule import make_schedule
from .trainer import TrainConfig, train
from .ugnet import UGnetConfig


class DiffSTGForecaster(BaseEstimator):
    """Probabilistic spatio-temporal forecaster.

    ``fit`` takes a whole series ``[T, V]`` or ``[T, V, F]``, splits it
    chronologically 6:2:2 and trains with early stopping on validation CRPS.
    ``predict`` maps history windows ``[W, T_h, V(, F)]`` to the ensemble mean
    ``[W, T_p, V(, F)]`` in data units; ``sample`` returns the full ensemble
    with a leading sample axis.
    """

    def __init__(self, adjacency=None, T_h: int = 12, T_p: int = 12, C: int = 32, K: int = 3, depth: int = 2,
                 N: int = 100, beta_1: float = 1e-4, beta_N: float = 0.2, batch_size: int = 8,
                 lr: float = 0.002, max_epochs: int = 50, patience: int = 10, steps_per_epoch: int = 0,
                 time_budget: float = 0.0, S: int = 8, k: int = 1, M: int | None = None,
                 sampler: str = "ddpm", random_state: int = 0):
        self.adjacency = adjacency
        self.T_h = T_h
        self.T_p = T_p
        self.C = C
        self.K = K
        self.depth = depth
        self.N = N
        self.beta_1 = beta_1
        self.beta_N = beta_N
        self.batch_size = batch_size
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.steps_per_epoch = steps_per_epoch
        self.time_budget = time_budget
        self.S = S
        self.k = k
        self.M = M
        self.sampler = sampler
        self.random_state = random_state

    def _graph(self, V: int) -> Graph:
        if self.adjacency is None:
            raise ValueError("adjacency is required")
        graph = self.adjacency if isinstance(self.adjacency, Graph) else Graph(np.asarray(self.adjacency, float))
        if graph.V != V:
            raise ValueError(f"adjacency has {graph.V} nodes but X has {V}")
        return graph

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim not in (2, 3):
            raise ValueError(f"X must be [T, V] or [T, V, F], got shape {list(X.shape)}")
        self.squeeze_ = X.ndim == 2
        signals = X[..., None] if self.squeeze_ else X
        dataset = STGDataset(signals, self._graph(signals.shape[1]))
        config = TrainConfig(batch_size=self.batch_size, lr=self.lr, max_epochs=self.max_epochs,
                             patience=self.patience, seed=self.random_state, N=self.N, beta_1=self.beta_1,
                             beta_N=self.beta_N, steps_per_epoch=self.steps_per_epoch,
                             time_budget=self.time_budget, T_h=self.T_h, T_p=self.T_p)
        mcfg = UGnetConfig(V=dataset.V, F=dataset.F, T=self.T_h + self.T_p, C=self.C, K=self.K, depth=self.depth)
        result = train(dataset, config, mcfg)
        self.model_ = result.model
        self.scaler_ = dataset.scaler
        self.graph_ = dataset.graph
        self.schedule_ = make_schedule("quadratic", self.N, self.beta_1, self.beta_N)
        self.history_ = result.log
        self.best_val_crps_ = result.best_val_crps
        self.n_features_in_ = dataset.V
        return self

    def _batch(self, X_hist) -> WindowBatch:
        check_is_fitted(self, "model_")
        X = np.asarray(X_hist, dtype=np.float64)
        if self.squeeze_:
            X = X[..., None]
        if X.ndim == 3:
            X = X[None]
        W, T_h, V, F = X.shape
        if T_h != self.T_h or V != self.n_features_in_:
            raise ValueError(f"history windows must be [W, {self.T_h}, {self.n_features_in_}, ...], "
                             f"got {list(np.shape(X_hist))}")
        if not np.all(np.isfinite(X)):
            raise ValueError("history contains missing or non-finite values")
        z = (X - self.scaler_.mean_) / self.scaler_.scale_
        x_all = np.zeros((W, F, V, self.T_h + self.T_p))
        x_all[..., :self.T_h] = np.transpose(z, (0, 3, 2, 1))
        mask = np.zeros((W, V, self.T_h + self.T_p))
        mask[..., :self.T_h] = 1.0
        return WindowBatch(x_all, mask, self.graph_)

    def sample(self, X_hist, seed: int | None = None) -> np.ndarray:
        """Ensemble ``[S, W, T_p, V(, F)]`` in data units."""
        batch = self._batch(X_hist)
        config = SamplerConfig(S=self.S, k=self.k, M=self.M, mode=self.sampler)
        seed = self.random_state if seed is None else seed
        z, _ = sample_ensembles(self.model_, batch, self.schedule_, config, seed=seed, T_h=self.T_h)
        raw = destandardize(z, (self.scaler_.mean_, self.scaler_.scale_))   # [S, W, F, V, T_p]
        raw = np.transpose(raw, (0, 1, 4, 3, 2))
        return raw[..., 0] if self.squeeze_ else raw

    def predict(self, X_hist) -> np.ndarray:
        return self.sample(X_hist).mean(axis=0)

    def score(self, X_hist, y) -> float:
        """Negative mean CRPS in data units (higher is better)."""
        samples = self.sample(X_hist)
        return -float(crps_empirical(samples, np.asarray(y, dtype=np.float64)).mean())
