"""Diffusion variance schedules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """beta_1..beta_N and the quantities derived from it.

    Arrays are indexed by diffusion step n directly: index 0 holds the
    alpha_0 := 1 convention (``alpha_bar[0] == 1``, ``beta[0] == 0``).
    """

    beta: np.ndarray
    alpha_hat: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    one_minus_alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        b = np.asarray(betas, dtype=np.float64).reshape(-1)
        if b.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("betas must be non-decreasing")
        beta = np.concatenate([[0.0], b])
        alpha_hat = 1.0 - beta
        # 1 - alpha_bar via expm1 avoids cancellation for the first steps
        log_ab = np.cumsum(np.log1p(-beta))
        alpha_bar = np.exp(log_ab)
        one_minus = -np.expm1(log_ab)
        beta_tilde = np.zeros_like(beta)
        beta_tilde[1:] = one_minus[:-1] / one_minus[1:] * beta[1:]
        for arr in (beta, alpha_hat, alpha_bar, one_minus, beta_tilde):
            arr.setflags(write=False)
        return cls(beta, alpha_hat, alpha_bar, beta_tilde, one_minus)

    @property
    def N(self) -> int:
        return self.beta.size - 1

    def check_step(self, n: int) -> int:
        if not 1 <= n <= self.N:
            raise ValueError(f"diffusion step {n} outside 1..{self.N}")
        return int(n)

    def reverse_variance(self, n: int) -> float:
        """Variance of p(x_{n-1} | x_n): (1 - alpha_{n-1}) / (1 - alpha_n) * beta_n."""
        n = self.check_step(n)
        return float(self.one_minus_alpha_bar[n - 1] / self.one_minus_alpha_bar[n] * self.beta[n])


def make_quadratic_schedule(N: int, beta_1: float = 1e-4, beta_N: float = 0.1) -> NoiseSchedule:
    """Interpolate sqrt(beta) linearly from sqrt(beta_1) to sqrt(beta_N) over N steps."""
    _check_bounds(N, beta_1, beta_N)
    n = np.arange(1, N + 1)
    betas = ((N - n) / (N - 1) * np.sqrt(beta_1) + (n - 1) / (N - 1) * np.sqrt(beta_N)) ** 2
    betas[0], betas[-1] = beta_1, beta_N
    betas = np.maximum.accumulate(np.clip(betas, beta_1, beta_N))   # rounding can break monotonicity by an ulp
    return NoiseSchedule.from_betas(betas)


def make_linear_schedule(N: int, beta_1: float = 1e-4, beta_N: float = 0.1) -> NoiseSchedule:
    _check_bounds(N, beta_1, beta_N)
    return NoiseSchedule.from_betas(np.linspace(beta_1, beta_N, N))


def make_schedule(kind: str, N: int, beta_1: float, beta_N: float) -> NoiseSchedule:
    if kind == "quadratic":
        return make_quadratic_schedule(N, beta_1, beta_N)
    if kind == "linear":
        return make_linear_schedule(N, beta_1, beta_N)
    raise ValueError(f"unknown schedule {kind!r}")


def alpha_bar(schedule: NoiseSchedule, n: int) -> float:
    """Cumulative product of (1 - beta_i) for i = 1..n."""
    return float(schedule.alpha_bar[schedule.check_step(n)])


def _check_bounds(N, beta_1, beta_N):
    if int(N) != N or N < 2:
        raise ValueError(f"N must be an integer >= 2, got {N}")
    if not 0 < beta_1 <= beta_N < 1:
        raise ValueError(f"need 0 < beta_1 <= beta_N < 1, got {beta_1}, {beta_N}")
