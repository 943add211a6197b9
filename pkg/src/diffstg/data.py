"""Dataset ingestion, standardization, windowing and the synthetic ring process."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_discrete_lyapunov
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .diffusion import STGWindow, WindowBatch
from .graph import Graph, read_adjacency_csv, ring_graph, write_adjacency_csv


class NodeScaler(TransformerMixin, BaseEstimator):
    """Per-node z-score for time-major ``[T, V]`` (or ``[T, V, F]``) signals.

    Nodes with zero spread are only centred.
    """

    def fit(self, X, y=None):
        X = _signals(X)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        self.n_nodes_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = _signals(X)
        return (X - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self)
        return np.asarray(X) * self.scale_ + self.mean_


def _signals(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return check_array(X, ensure_all_finite=True)
    if X.ndim == 3 and np.all(np.isfinite(X)):
        return X
    raise ValueError(f"signals must be finite [T, V] or [T, V, F], got shape {list(X.shape)}")


@dataclass
class STGDataset:
    signals: np.ndarray                 # [T_total, V, F]
    graph: Graph
    interval: str = ""
    oracle: "GaussianOracle | None" = None
    scaler: NodeScaler | None = field(default=None, repr=False)

    def __post_init__(self):
        s = np.asarray(self.signals, dtype=np.float64)
        if s.ndim == 2:
            s = s[..., None]
        if s.ndim != 3:
            raise ValueError(f"signals must be [T, V] or [T, V, F], got shape {list(s.shape)}")
        if s.shape[1] != self.graph.V:
            raise ValueError(f"signals have {s.shape[1]} nodes but the adjacency has {self.graph.V}")
        bad = np.argwhere(~np.isfinite(s))
        if bad.size:
            raise ValueError(f"non-finite signal at row {bad[0][0]}, node {bad[0][1]}")
        self.signals = s

    @property
    def T_total(self) -> int:
        return self.signals.shape[0]

    @property
    def V(self) -> int:
        return self.signals.shape[1]

    @property
    def F(self) -> int:
        return self.signals.shape[2]

    def fit_scaler(self, train_rows: range) -> NodeScaler:
        """Per-node z-score fitted on training rows only."""
        self.scaler = NodeScaler().fit(self.signals[train_rows.start:train_rows.stop])
        return self.scaler

    @property
    def norm_stats(self) -> tuple[np.ndarray, np.ndarray]:
        if self.scaler is None:
            raise RuntimeError("call fit_scaler before asking for norm_stats")
        return self.scaler.mean_, self.scaler.scale_


def load_csv(signals_path: str | Path, adjacency_path: str | Path, interval: str = "") -> STGDataset:
    """Signals CSV: header of node ids, one row per time step, one column per node."""
    graph = read_adjacency_csv(adjacency_path)
    signals_path = Path(signals_path)
    rows = []
    with signals_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{signals_path}: empty file")
        for i, row in enumerate(reader):
            if not row:
                continue
            vals = []
            for j, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise ValueError(f"{signals_path}: missing or invalid value at data row {i}, column {j}")
                vals.append(v)
            if len(vals) != len(header):
                raise ValueError(f"{signals_path}: data row {i} has {len(vals)} cells, header has {len(header)}")
            rows.append(vals)
    if len(header) != graph.V:
        raise ValueError(f"{signals_path} has {len(header)} node columns but {adjacency_path} has {graph.V} nodes")
    return STGDataset(np.array(rows).reshape(len(rows), len(header)), graph, interval)


def write_signals_csv(signals: np.ndarray, path: str | Path) -> None:
    signals = np.asarray(signals)
    if signals.ndim == 3:
        signals = signals[..., 0]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"{v}" for v in range(signals.shape[1])])
        w.writerows([[repr(float(x)) for x in row] for row in signals])


def chronological_split(T_total: int, ratios=(6, 2, 2), window: int = 24) -> tuple[range, range, range]:
    """Contiguous train/val/test row ranges in time order."""
    total = float(sum(ratios))
    b1 = int(math.floor(T_total * ratios[0] / total))
    b2 = int(math.floor(T_total * (ratios[0] + ratios[1]) / total))
    parts = (range(0, b1), range(b1, b2), range(b2, T_total))
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) < window:
            raise ValueError(f"{name} split has {len(part)} rows, fewer than one window of {window}")
    return parts


def window_starts(rows: range, T: int, stride: int = 1) -> np.ndarray:
    """Start rows of every window fully inside ``rows``."""
    return np.arange(rows.start, rows.stop - T + 1, stride)


def window_batch(dataset: STGDataset, rows: range, T_h: int = 12, T_p: int = 12, stride: int = 1,
                 starts=None) -> tuple[WindowBatch, np.ndarray]:
    """Standardized windows of ``rows`` as one array batch plus their start rows."""
    T = T_h + T_p
    if starts is None:
        starts = window_starts(rows, T, stride)
    else:
        starts = np.asarray(starts, dtype=int)
        if np.any(starts < rows.start) or np.any(starts + T > rows.stop):
            raise IndexError(f"window starts must keep windows inside rows {rows.start}..{rows.stop - 1}")
    if dataset.scaler is None:
        raise RuntimeError("dataset scaler not fitted; call fit_scaler on the training rows first")
    z = dataset.scaler.transform(dataset.signals)                      # [T_total, V, F]
    idx = starts[:, None] + np.arange(T)[None, :]
    x = z[idx]                                                         # [W, T, V, F]
    x_all = np.ascontiguousarray(np.transpose(x, (0, 3, 2, 1)))        # [W, F, V, T]
    mask = np.zeros((len(starts), dataset.V, T))
    mask[:, :, :T_h] = 1.0
    return WindowBatch(x_all, mask, dataset.graph), starts


def make_windows(dataset: STGDataset, rows: range, T_h: int = 12, T_p: int = 12, stride: int = 1) -> list[STGWindow]:
    if len(rows) < T_h + T_p:
        raise ValueError(f"split of {len(rows)} rows cannot hold a window of {T_h + T_p}")
    batch, starts = window_batch(dataset, rows, T_h, T_p, stride)
    stats = dataset.norm_stats
    return [STGWindow(batch.x_all[i], batch.mask[i], dataset.graph, stats, int(s))
            for i, s in enumerate(starts)]


def destandardize(x, norm_stats) -> np.ndarray:
    """Map ``[..., F, V, T]`` standardized values back to raw units."""
    mean, scale = norm_stats                                           # [V, F]
    mean = np.asarray(mean).T[..., None]
    scale = np.asarray(scale).T[..., None]
    return np.asarray(x) * scale + mean


# -- synthetic ring process ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """x_t = rho((1-lam) I + lam P) x_{t-1} + noise * e_t on a ring, P row-normalised adjacency."""

    V: int = 8
    rho: float = 0.9
    lam: float = 0.4
    noise: float = 1.0
    length: int = 20000

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")
        if not 0 <= self.lam < 1:
            raise ValueError(f"lam must lie in [0, 1), got {self.lam}")
        if self.noise <= 0 or self.V < 1 or self.length < 2:
            raise ValueError(f"invalid synthetic spec {self}")
        if np.max(np.abs(np.linalg.eigvals(self.transition()))) >= 1 - 1e-9:
            raise ValueError("synthetic process is not stationary")

    def graph(self) -> Graph:
        return ring_graph(self.V)

    def transition(self) -> np.ndarray:
        A = self.graph().A
        rows = A.sum(axis=1, keepdims=True)
        P = np.divide(A, rows, out=np.zeros_like(A), where=rows > 0)
        return self.rho * ((1 - self.lam) * np.eye(self.V) + self.lam * P)


@dataclass(frozen=True)
class GaussianOracle:
    """Exact h-step predictive law of the linear-Gaussian ring process."""

    transition: np.ndarray
    noise: float

    def predictive(self, x_last: np.ndarray, T_p: int) -> tuple[np.ndarray, np.ndarray]:
        """Mean ``[..., T_p, V]`` and full covariance ``[T_p, V, V]`` given the last observation."""
        M = self.transition
        V = M.shape[0]
        means, covs = [], []
        Mh = np.eye(V)
        cov = np.zeros((V, V))
        for _ in range(T_p):
            cov = M @ cov @ M.T + self.noise ** 2 * np.eye(V)
            Mh = M @ Mh
            means.append(np.asarray(x_last) @ Mh.T)
            covs.append(cov)
        return np.stack(means, axis=-2), np.stack(covs)

    def marginals(self, x_last: np.ndarray, T_p: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-node predictive mean and std, each ``[..., T_p, V]``."""
        mean, cov = self.predictive(x_last, T_p)
        std = np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))
        return mean, np.broadcast_to(std, mean.shape)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> STGDataset:
    """Draw a stationary series (initial state from the stationary law)."""
    rng = np.random.default_rng(seed)
    M = spec.transition()
    stat_cov = solve_discrete_lyapunov(M, spec.noise ** 2 * np.eye(spec.V))
    x = np.empty((spec.length, spec.V))
    x[0] = np.linalg.cholesky(stat_cov) @ rng.standard_normal(spec.V)
    eps = rng.standard_normal((spec.length, spec.V)) * spec.noise
    for t in range(1, spec.length):
        x[t] = M @ x[t - 1] + eps[t]
    return STGDataset(x, spec.graph(), interval="1 step", oracle=GaussianOracle(M, spec.noise))


def write_oracle_csv(dataset: STGDataset, path: str | Path, T_p: int = 12) -> None:
    """One row per possible last-observed row t: predictive mean and std per node and horizon."""
    if dataset.oracle is None:
        raise ValueError("dataset has no oracle")
    x = dataset.signals[..., 0]
    last = np.arange(0, dataset.T_total - T_p)
    mean, std = dataset.oracle.marginals(x[last], T_p)                # [n, T_p, V]
    V = dataset.V
    cols = ([f"mean_n{v}_h{h}" for h in range(1, T_p + 1) for v in range(V)]
            + [f"std_n{v}_h{h}" for h in range(1, T_p + 1) for v in range(V)])
    body = np.column_stack([last, mean.reshape(len(last), -1), std.reshape(len(last), -1)])
    header = ",".join(["t_last"] + cols)
    np.savetxt(path, body, delimiter=",", header=header, comments="", fmt=["%d"] + ["%.10g"] * (body.shape[1] - 1))


def read_oracle_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (t_last, mean, std) with mean/std shaped ``[rows, T_p, V]``."""
    path = Path(path)
    header = path.open().readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n_mean = sum(1 for c in header if c.startswith("mean_"))
    T_p = max(int(c.rsplit("_h", 1)[1]) for c in header if c.startswith("mean_"))
    V = n_mean // T_p
    t = data[:, 0].astype(int)
    mean = data[:, 1:1 + n_mean].reshape(-1, T_p, V)
    std = data[:, 1 + n_mean:1 + 2 * n_mean].reshape(-1, T_p, V)
    return t, mean, std


def write_synthetic(dataset: STGDataset, out_dir: str | Path, T_p: int = 12) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"signals": out_dir / "signals.csv", "adjacency": out_dir / "adjacency.csv",
             "oracle": out_dir / "oracle.csv"}
    write_signals_csv(dataset.signals, paths["signals"])
    write_adjacency_csv(dataset.graph, paths["adjacency"])
    write_oracle_csv(dataset, paths["oracle"], T_p)
    return paths


# -- baselines ---------------------------------------------------------------------------

def persistence_ensemble(batch: WindowBatch, train_z: np.ndarray, T_h: int, S: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Last observed value plus bootstrapped historical residual paths.

    ``train_z`` is the standardized training series ``[T, V, F]``. Each sample
    reuses a whole residual path x[t+h] - x[t] from a random training row.
    Returns ``[S, W, F, V, T_p]``.
    """
    W, F, V, T = batch.x_all.shape
    T_p = T - T_h
    last = batch.x_all[..., T_h - 1]                                   # [W, F, V]
    z = np.transpose(train_z, (2, 1, 0))                               # [F, V, T_train]
    n_train = z.shape[-1] - T_p
    h = np.arange(1, T_p + 1)
    picks = rng.integers(0, n_train, size=(S, W))
    resid = z[:, :, picks[..., None] + h] - z[:, :, picks][..., None]  # [F, V, S, W, T_p]
    resid = np.transpose(resid, (2, 3, 0, 1, 4))
    return last[None, ..., None] + resid
