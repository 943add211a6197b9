"""Shared test utilities: finite-difference gradient checks and tiny models."""
from __future__ import annotations

import numpy as np

from diffstg import tensor as T


def relative_error(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(fn, arrays, seed: int = 0, step: float = 1e-6) -> float:
    """Worst relative error of tape gradients against central differences.

    The scalar objective is sum(fn(*inputs) * R) for a fixed random R, so every
    output entry contributes. Runs in float64.
    """
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        tensors = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]

        def outputs():
            out = fn(*tensors)
            return list(out) if isinstance(out, (list, tuple)) else [out]

        weights = [rng.uniform(-1, 1, o.shape) for o in outputs()]

        def objective(record: bool):
            outs = outputs()
            terms = [T.sum(T.mul(o, T.Tensor(w))) for o, w in zip(outs, weights)]
            total = terms[0]
            for t in terms[1:]:
                total = T.add(total, t)
            return total

        with T.Tape() as tape:
            loss = objective(True)
        tape.backward(loss)
        worst = 0.0
        for t in tensors:
            numeric = T.finite_difference_grad(lambda: objective(False).item(), t.data, step)
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            worst = max(worst, relative_error(analytic, numeric))
        return worst


def naive_causal_conv(x: np.ndarray, w: np.ndarray, pad_left: int) -> np.ndarray:
    """Direct loop evaluation of a left-padded 1-D convolution over axis -2."""
    K, _, C_out = w.shape
    T_len = x.shape[-2]
    xp = np.concatenate([np.zeros(x.shape[:-2] + (pad_left, x.shape[-1])), x], axis=-2)
    T_out = T_len + pad_left - K + 1
    out = np.zeros(x.shape[:-2] + (T_out, C_out))
    for t in range(T_out):
        for k in range(K):
            out[..., t, :] += xp[..., t + k, :] @ w[k]
    return out
