"""Conditional masked diffusion: corruption, training loss and reverse samplers.

A denoiser is any callable ``denoiser(x_n, x_msk, n, graph)`` returning the
predicted noise with the shape of ``x_n``; inputs may be ``[F, V, T]`` or
batched ``[B, F, V, T]`` and ``n`` an int or one step per batch row.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .graph import Graph
from .schedule import NoiseSchedule

Denoiser = Callable[..., "T.Tensor | np.ndarray"]


@dataclass(frozen=True)
class STGWindow:
    """History followed by future for one instance, in standardized units."""

    x_all: np.ndarray          # [F, V, T]
    mask: np.ndarray           # [V, T], 1 = observed
    graph: Graph
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None
    start: int = 0

    def __post_init__(self):
        if self.x_all.ndim != 3 or self.mask.shape != self.x_all.shape[1:]:
            raise ValueError(f"window shapes disagree: x_all {list(self.x_all.shape)}, "
                             f"mask {list(self.mask.shape)}")
        if not np.all(np.isfinite(self.x_all)):
            raise ValueError("window contains non-finite values")

    @property
    def T_h(self) -> int:
        return int(self.mask[0].sum())

    @property
    def x_msk(self) -> np.ndarray:
        return self.x_all * self.mask[None]

    @property
    def future(self) -> np.ndarray:
        return self.x_all[..., self.T_h:]


@dataclass(frozen=True)
class WindowBatch:
    x_all: np.ndarray          # [B, F, V, T]
    mask: np.ndarray           # [B, V, T]
    graph: Graph

    @classmethod
    def stack(cls, windows: Sequence[STGWindow]) -> "WindowBatch":
        return cls(np.stack([w.x_all for w in windows]), np.stack([w.mask for w in windows]),
                   windows[0].graph)

    @property
    def x_msk(self) -> np.ndarray:
        return self.x_all * self.mask[:, None]


@dataclass
class ForecastEnsemble:
    samples: np.ndarray                       # [S, F, V, T_p]
    provenance: list[tuple[int, int]] = field(default_factory=list)   # (trajectory, step index)

    def __post_init__(self):
        if self.samples.ndim < 1 or self.samples.shape[0] < 1:
            raise ValueError("ensemble needs at least one sample")

    @property
    def S(self) -> int:
        return self.samples.shape[0]

    @property
    def n_trajectories(self) -> int:
        return len({t for t, _ in self.provenance})

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


def _as_batch(window) -> WindowBatch:
    if isinstance(window, WindowBatch):
        return window
    if isinstance(window, STGWindow):
        return WindowBatch(window.x_all[None], window.mask[None], window.graph)
    return WindowBatch.stack(list(window))


def _predict(denoiser: Denoiser, x_n, x_msk, n, graph) -> np.ndarray:
    out = denoiser(x_n, x_msk, n, graph)
    return out.data if isinstance(out, T.Tensor) else np.asarray(out)


# -- forward process ------------------------------------------------------------

def forward_sample(x0, n: int, schedule: NoiseSchedule, eps):
    """x_n = sqrt(alpha_n) x_0 + sqrt(1 - alpha_n) eps. ``n`` may be per batch row."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"forward_sample: x0 {list(x0.shape)} vs eps {list(eps.shape)}")
    n_arr = np.asarray(n)
    if np.any(n_arr < 1) or np.any(n_arr > schedule.N):
        raise ValueError(f"diffusion step outside 1..{schedule.N}")
    a = schedule.alpha_bar[n_arr]
    if a.ndim:
        a = a.reshape(a.shape + (1,) * (x0.ndim - a.ndim))
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def posterior_params(x0, xn, n: int, schedule: NoiseSchedule):
    """Mean and variance of q(x_{n-1} | x_n, x_0)."""
    n = schedule.check_step(n)
    a_prev, b = schedule.alpha_bar[n - 1], schedule.beta[n]
    om_prev, om_n = schedule.one_minus_alpha_bar[n - 1], schedule.one_minus_alpha_bar[n]
    c0 = math.sqrt(a_prev) * b / om_n
    cn = math.sqrt(schedule.alpha_hat[n]) * om_prev / om_n
    return c0 * np.asarray(x0) + cn * np.asarray(xn), float(schedule.beta_tilde[n])


# -- training objective -----------------------------------------------------------

def denoising_loss(denoiser: Denoiser, window, schedule: NoiseSchedule, rng: np.random.Generator,
                   future_only: bool = False) -> T.Tensor:
    """Mean squared error between injected and predicted noise for random steps.

    One step n ~ Uniform{1..N} and one noise draw per window. By default the
    mean runs over every position of x_all, history included.
    """
    batch = _as_batch(window)
    B = batch.x_all.shape[0]
    dtype = T.get_default_dtype()
    n = rng.integers(1, schedule.N + 1, size=B)
    eps = rng.standard_normal(batch.x_all.shape)
    x_n = forward_sample(batch.x_all, n, schedule, eps)
    pred = denoiser(T.Tensor(x_n, dtype=dtype), T.Tensor(batch.x_msk, dtype=dtype), n, batch.graph)
    pred = T._as_tensor(pred)
    diff = T.sub(T.Tensor(eps, dtype=pred.dtype), pred)
    sq = T.mul(diff, diff)
    if not future_only:
        return T.mean(sq)
    weight = np.broadcast_to((1.0 - batch.mask)[:, None], sq.shape)
    total = T.sum(T.mul(sq, T.Tensor(weight, dtype=pred.dtype)))
    return T.scale(total, 1.0 / max(float(weight.sum()), 1.0))


# -- reverse process ---------------------------------------------------------------

def ddpm_step(x_n, eps_hat, n: int, schedule: NoiseSchedule, z=None):
    """One ancestral step x_n -> x_{n-1}; no noise is added at n = 1."""
    b = schedule.beta[n]
    mean = (x_n - b / math.sqrt(schedule.one_minus_alpha_bar[n]) * eps_hat) / math.sqrt(schedule.alpha_hat[n])
    if n > 1 and z is not None:
        return mean + math.sqrt(schedule.beta_tilde[n]) * z
    return mean


def ddpm_sigma(schedule: NoiseSchedule, t: int, t_prev: int) -> float:
    """Noise scale that makes a (t -> t_prev) subset step match ancestral sampling."""
    a_t, a_p = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    return math.sqrt((1.0 - a_p) / (1.0 - a_t)) * math.sqrt(max(1.0 - a_t / a_p, 0.0))


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule, z=None, eta: float = 1.0):
    """Subset-sampling step x_t -> x_{t_prev}; ``t_prev = 0`` returns the x_0 estimate."""
    a_t, a_p = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    sigma = eta * ddpm_sigma(schedule, t, t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    out = math.sqrt(a_p) * x0_hat + math.sqrt(max(1.0 - a_p - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0 and z is not None:
        out = out + sigma * z
    return out


def subset_steps(N: int, M: int) -> np.ndarray:
    """M steps spread uniformly over 1..N, always ending at N."""
    if not 1 <= M <= N:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={N}")
    return np.round(np.arange(1, M + 1) * N / M).astype(int)


def check_tau(tau, N: int) -> np.ndarray:
    tau = np.asarray(tau, dtype=int).reshape(-1)
    if tau.size == 0 or np.any(np.diff(tau) <= 0) or tau[0] < 1 or tau[-1] != N:
        raise ValueError(f"tau must be strictly increasing within 1..{N} and end at N, got {tau.tolist()}")
    return tau


def reverse_trajectories(denoiser: Denoiser, x_msk: np.ndarray, graph: Graph, schedule: NoiseSchedule,
                         rngs: Sequence[np.random.Generator], tau=None, mode: str = "ddpm",
                         eta: float = 1.0, keep: int = 1, chunk: int = 256):
    """Run one reverse trajectory per row of ``x_msk`` (``[R, F, V, T]``).

    Row r draws all of its noise from ``rngs[r]``. Returns ``(states, steps)``
    where ``states`` is ``[keep, R, F, V, T]`` holding the final state first
    and then the preceding ones, and ``steps`` the matching diffusion indices.
    """
    R = x_msk.shape[0]
    if len(rngs) != R:
        raise ValueError(f"need one generator per trajectory, got {len(rngs)} for {R}")
    if mode == "ddpm":
        path = np.arange(schedule.N, 0, -1)
    elif mode == "ddim":
        path = check_tau(subset_steps(schedule.N, schedule.N) if tau is None else tau, schedule.N)[::-1]
    else:
        raise ValueError(f"unknown sampler mode {mode!r}")
    if not 1 <= keep <= len(path):
        raise ValueError(f"cannot keep {keep} states from a {len(path)}-step trajectory")
    targets = list(path[1:]) + [0]
    dtype = T.get_default_dtype()
    shape = x_msk.shape[1:]
    x = np.stack([r.standard_normal(shape) for r in rngs]).astype(dtype)
    cond = np.asarray(x_msk, dtype=dtype)
    kept: deque = deque(maxlen=keep)
    for n, n_prev in zip(path, targets):
        eps_hat = np.concatenate([_predict(denoiser, x[s:s + chunk], cond[s:s + chunk], int(n), graph)
                                  for s in range(0, R, chunk)])
        z = np.stack([r.standard_normal(shape) for r in rngs]).astype(dtype)
        if mode == "ddpm":
            x = ddpm_step(x, eps_hat, int(n), schedule, z)
        else:
            x = ddim_step(x, eps_hat, int(n), int(n_prev), schedule, z, eta)
        x = np.asarray(x, dtype=dtype)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite values after reverse step n={int(n)}")
        kept.append((int(n_prev), x))
    kept = list(kept)[::-1]
    return np.stack([s for _, s in kept]), [n for n, _ in kept]


def ddpm_sample(denoiser: Denoiser, window, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling over all N steps; returns the full ``[F, V, T]`` x_0."""
    batch = _as_batch(window)
    states, _ = reverse_trajectories(denoiser, batch.x_msk[:1], batch.graph, schedule, [rng])
    return states[0, 0]


def ddim_sample(denoiser: Denoiser, window, schedule: NoiseSchedule, tau, rng: np.random.Generator,
                eta: float = 1.0) -> np.ndarray:
    """Subset sampling over steps ``tau``; ``eta = 1`` uses the ancestral-equivalent noise scale."""
    batch = _as_batch(window)
    tau = check_tau(tau, schedule.N)
    states, _ = reverse_trajectories(denoiser, batch.x_msk[:1], batch.graph, schedule, [rng],
                                     tau=tau, mode="ddim", eta=eta)
    return states[0, 0]


@dataclass(frozen=True)
class SamplerConfig:
    S: int = 8
    k: int = 1
    M: int | None = None
    mode: str = "ddpm"
    eta: float = 1.0

    def __post_init__(self):
        if self.S < 1 or not 1 <= self.k <= self.S:
            raise ValueError(f"need S >= 1 and 1 <= k <= S, got S={self.S}, k={self.k}")
        if self.mode not in ("ddpm", "ddim"):
            raise ValueError(f"sampler mode must be ddpm or ddim, got {self.mode!r}")

    @property
    def n_trajectories(self) -> int:
        return math.ceil(self.S / self.k)

    def tau(self, N: int):
        return subset_steps(N, self.M or N) if self.mode == "ddim" else None


def trajectory_rng(seed: int, stream: int, trajectory: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(trajectory)])


def sample_ensembles(denoiser: Denoiser, batch: WindowBatch, schedule: NoiseSchedule,
                     config: SamplerConfig = SamplerConfig(), seed: int = 0,
                     streams: Sequence[int] | None = None, T_h: int | None = None,
                     chunk: int = 256) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Ensembles for every window of ``batch`` in one pass.

    Returns samples ``[S, W, F, V, T_p]`` (the future slice when ``T_h`` is
    given, else the full length) and the per-sample provenance.
    """
    W = batch.x_all.shape[0]
    R = config.n_trajectories
    streams = list(range(W)) if streams is None else list(streams)
    cond = np.repeat(batch.x_msk, R, axis=0)                       # window-major
    rngs = [trajectory_rng(seed, streams[w], r) for w in range(W) for r in range(R)]
    states, steps = reverse_trajectories(denoiser, cond, batch.graph, schedule, rngs,
                                         tau=config.tau(schedule.N), mode=config.mode,
                                         eta=config.eta, keep=config.k, chunk=chunk)
    states = states.reshape((config.k, W, R) + states.shape[2:])
    # sample order: trajectory, then step index (final state first)
    samples = np.transpose(states, (2, 0, 1) + tuple(range(3, states.ndim)))
    samples = samples.reshape((R * config.k, W) + states.shape[3:])[:config.S]
    provenance = [(r, steps[j]) for r in range(R) for j in range(config.k)][:config.S]
    if T_h is not None:
        samples = samples[..., T_h:]
    return samples, provenance


def ensemble_sample(denoiser: Denoiser, window: STGWindow, schedule: NoiseSchedule, S: int = 8, k: int = 1,
                    sampler: SamplerConfig | None = None, seed: int = 0, stream: int = 0) -> ForecastEnsemble:
    """S forecast samples from ceil(S/k) trajectories, reusing each trajectory's last k states."""
    cfg = sampler or SamplerConfig(S=S, k=k)
    batch = _as_batch(window)
    samples, prov = sample_ensembles(denoiser, batch, schedule, cfg, seed=seed, streams=[stream],
                                     T_h=window.T_h)
    return ForecastEnsemble(samples[:, 0], prov)
