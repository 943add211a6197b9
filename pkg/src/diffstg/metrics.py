"""CRPS, MAE and RMSE for sample ensembles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .diffusion import ForecastEnsemble


def crps_empirical(samples, obs):
    """CRPS of the empirical distribution of ``samples`` (axis 0) at ``obs``.

    Uses E|X - y| - 0.5 E|X - X'|, with the pairwise term evaluated on sorted
    samples. Broadcasts over trailing axes.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ValueError("crps_empirical needs at least one sample")
    y = np.asarray(obs, dtype=np.float64)
    S = x.shape[0]
    term1 = np.abs(x - y).mean(axis=0)
    xs = np.sort(x, axis=0)
    w = (2 * np.arange(1, S + 1) - S - 1).reshape((S,) + (1,) * (x.ndim - 1))
    # sum_ij |x_i - x_j| = 2 sum_i (2i - S - 1) x_(i)
    term2 = (w * xs).sum(axis=0) / S ** 2
    return np.maximum(term1 - term2, 0.0)


def crps_gaussian(mu, sigma, obs):
    """Closed-form CRPS of N(mu, sigma^2) at ``obs``."""
    mu, sigma, obs = map(np.asarray, (mu, sigma, obs))
    z = (obs - mu) / sigma
    return sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - 1 / np.sqrt(np.pi))


@dataclass
class EvalReport:
    crps: float
    mae: float
    rmse: float
    crps_h: np.ndarray
    mae_h: np.ndarray
    rmse_h: np.ndarray
    count: int
    raw: "EvalReport | None" = None

    def row(self) -> dict:
        out = {"crps": self.crps, "mae": self.mae, "rmse": self.rmse, "count": self.count}
        if self.raw is not None:
            out.update(crps_raw=self.raw.crps, mae_raw=self.raw.mae, rmse_raw=self.raw.rmse)
        return out


def _report(samples: np.ndarray, truth: np.ndarray) -> EvalReport:
    # samples [S, ..., T_p], truth [..., T_p]; horizon is the last axis
    return _summarize(crps_empirical(samples, truth), samples.mean(axis=0) - truth, truth)


def _summarize(crps: np.ndarray, err: np.ndarray, truth: np.ndarray) -> EvalReport:
    T_p = truth.shape[-1]
    crps_h = crps.reshape(-1, T_p).mean(axis=0)
    abs_h = np.abs(err).reshape(-1, T_p).mean(axis=0)
    mse_h = (err ** 2).reshape(-1, T_p).mean(axis=0)
    return EvalReport(float(crps.mean()), float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean())),
                      crps_h, abs_h, np.sqrt(mse_h), int(truth.size))


def evaluate(ensemble, truth, norm_stats=None) -> EvalReport:
    """Score an ensemble against the truth.

    ``ensemble`` is a :class:`ForecastEnsemble` or an array ``[S, ..., F, V, T_p]``
    with ``truth`` shaped like one sample. The point forecast is the ensemble
    mean. Per-horizon CRPS and MAE average back to the scalars; per-horizon
    RMSE does so in the squared domain. With ``norm_stats`` (per-node mean and
    scale ``[V, F]``) a raw-scale report is attached as ``.raw``.
    """
    samples = ensemble.samples if isinstance(ensemble, ForecastEnsemble) else np.asarray(ensemble)
    truth = np.asarray(truth, dtype=np.float64)
    if samples.ndim < 1 or samples.shape[0] < 1:
        raise ValueError("ensemble needs at least one sample")
    if samples.shape[1:] != truth.shape:
        raise ValueError(f"ensemble sample shape {list(samples.shape[1:])} does not match truth {list(truth.shape)}")
    report = _report(samples, truth)
    if norm_stats is not None:
        from .data import destandardize
        report.raw = _report(destandardize(samples, norm_stats), destandardize(truth, norm_stats))
    return report


def evaluate_gaussian(mean, std, truth, norm_stats=None) -> EvalReport:
    """Score a Gaussian predictive distribution with closed-form CRPS.

    Arrays are ``[..., F, V, T_p]`` in standardized units; the point forecast
    is the mean.
    """
    mean, std, truth = (np.asarray(a, dtype=np.float64) for a in (mean, std, truth))
    report = _summarize(crps_gaussian(mean, std, truth), mean - truth, truth)
    if norm_stats is not None:
        from .data import destandardize
        scale = np.asarray(norm_stats[1]).T[..., None]
        raw_truth = destandardize(truth, norm_stats)
        raw_mean = destandardize(mean, norm_stats)
        report.raw = _summarize(crps_gaussian(raw_mean, std * scale, raw_truth), raw_mean - raw_truth, raw_truth)
    return report


def band_quantiles(samples, qs=(5, 25, 75, 95)) -> np.ndarray:
    """Empirical percentiles over axis 0, stacked on a new leading axis."""
    return np.percentile(np.asarray(samples), qs, axis=0)
