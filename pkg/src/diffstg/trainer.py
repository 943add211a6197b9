"""Adam, the training loop and early stopping on validation CRPS."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import STGDataset, chronological_split, window_batch, window_starts
from .diffusion import SamplerConfig, WindowBatch, denoising_loss, sample_ensembles
from .metrics import crps_empirical
from .schedule import make_schedule
from .ugnet import UGnet, UGnetConfig

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update. Parameters with no gradient are left untouched."""
    for name, g in grads.items():
        if g is not None and g.shape != params[name].shape:
            raise ValueError(f"adam_step: gradient for {name!r} has shape {list(g.shape)}, "
                             f"parameter has {list(params[name].shape)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data, dtype=np.float64)
            state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return state


def lr_at_epoch(epoch: int, lr: float = 0.002, halving_every: int = 5) -> float:
    """Learning rate for 1-based ``epoch``: halved after every ``halving_every`` epochs."""
    return lr * 0.5 ** ((epoch - 1) // halving_every)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, bool]:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
        return total, True
    return total, False


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 0.002
    lr_halving_every: int = 5
    patience: int = 10
    max_epochs: int = 50
    seed: int = 0
    N: int = 100
    beta_1: float = 1e-4
    beta_N: float = 0.2
    schedule: str = "quadratic"
    val_S: int = 4
    val_windows: int = 64
    steps_per_epoch: int = 0          # 0 = one pass over the training windows
    clip_norm: float = 1.0
    future_only: bool = False
    T_h: int = 12
    T_p: int = 12
    stride: int = 1
    time_budget: float = 0.0          # seconds; 0 = unlimited

    def __post_init__(self):
        for name in ("batch_size", "lr", "lr_halving_every", "patience", "max_epochs", "N", "val_S", "T_h", "T_p"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train config {name} must be positive, got {getattr(self, name)}")


@dataclass
class TrainResult:
    model: UGnet
    log: list[dict]
    best_epoch: int
    best_val_crps: float
    splits: tuple[range, range, range]


def validation_crps(model: UGnet, batch: WindowBatch, schedule, T_h: int, S: int, seed: int) -> float:
    samples, _ = sample_ensembles(model, batch, schedule, SamplerConfig(S=S), seed=seed, T_h=T_h)
    return float(crps_empirical(samples, batch.x_all[..., T_h:]).mean())


def _spread(starts: np.ndarray, count: int) -> np.ndarray:
    if count <= 0 or count >= len(starts):
        return starts
    return starts[np.linspace(0, len(starts) - 1, count).round().astype(int)]


def train(dataset: STGDataset, config: TrainConfig, model_config: UGnetConfig | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    """Fit a UGnet denoiser with the simplified noise-prediction loss.

    Keeps the parameters with the best validation CRPS and stops after
    ``patience`` epochs without improvement. When ``out_dir`` is given, the
    best checkpoint and ``train_log.csv`` are written there.
    """
    T_win = config.T_h + config.T_p
    splits = chronological_split(dataset.T_total, window=T_win)
    train_rows, val_rows, _ = splits
    dataset.fit_scaler(train_rows)
    schedule = make_schedule(config.schedule, config.N, config.beta_1, config.beta_N)
    if model_config is None:
        model_config = UGnetConfig(V=dataset.V, F=dataset.F, T=T_win)
    if (model_config.V, model_config.F, model_config.T) != (dataset.V, dataset.F, T_win):
        raise ValueError(f"model dims V,F,T = {model_config.V},{model_config.F},{model_config.T} "
                         f"do not match data {dataset.V},{dataset.F},{T_win}")
    model = UGnet(model_config, seed=config.seed)
    train_batch, _ = window_batch(dataset, train_rows, config.T_h, config.T_p, config.stride)
    val_starts = _spread(window_starts(val_rows, T_win), config.val_windows)
    val_batch, _ = window_batch(dataset, val_rows, config.T_h, config.T_p, starts=val_starts)

    rng = np.random.default_rng(config.seed)
    state = AdamState()
    n_train = train_batch.x_all.shape[0]
    steps = config.steps_per_epoch or max(1, n_train // config.batch_size)
    history: list[dict] = []
    best = (np.inf, 0, model.copy_params())
    t0 = time.perf_counter()
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / "train_log.csv").open("w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(["epoch", "train_loss", "val_crps", "lr", "wall_seconds", "clipped_steps"])

    try:
        for epoch in range(1, config.max_epochs + 1):
            lr = lr_at_epoch(epoch, config.lr, config.lr_halving_every)
            order = rng.permutation(n_train)
            losses, clipped = [], 0
            for step in range(steps):
                idx = order[(step * config.batch_size) % n_train:][:config.batch_size]
                if len(idx) < config.batch_size:
                    idx = rng.choice(n_train, config.batch_size, replace=False)
                batch = WindowBatch(train_batch.x_all[idx], train_batch.mask[idx], train_batch.graph)
                with T.Tape() as tape:
                    loss = denoising_loss(model, batch, schedule, rng, future_only=config.future_only)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
                    for p in model.params.values():
                        p.zero_grad()
                    T.backward(loss)
                tape.clear()
                grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
                _, was_clipped = clip_by_global_norm(grads, config.clip_norm)
                clipped += was_clipped
                adam_step(model.params, grads, state, lr)
                losses.append(value)
            val = validation_crps(model, val_batch, schedule, config.T_h, config.val_S, config.seed)
            wall = time.perf_counter() - t0
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_crps": val, "lr": lr,
                   "wall_seconds": wall, "clipped_steps": clipped}
            history.append(row)
            log.info("epoch %d loss %.4f val_crps %.4f lr %.2g (%.0fs, %d clipped)",
                     epoch, row["train_loss"], val, lr, wall, clipped)
            if writer is not None:
                writer.writerow([epoch, row["train_loss"], val, lr, wall, clipped])
                log_fh.flush()
            if val < best[0]:
                best = (val, epoch, model.copy_params())
            elif epoch - best[1] >= config.patience:
                break
            if config.time_budget and wall >= config.time_budget:
                break
    finally:
        if writer is not None:
            log_fh.close()

    model.load_arrays(best[2])
    if out_dir is not None:
        model.save(out_dir / "checkpoint", extra={
            "schedule": {"kind": config.schedule, "N": config.N, "beta_1": config.beta_1, "beta_N": config.beta_N},
            "data": {"T_h": config.T_h, "T_p": config.T_p},
            "best_epoch": best[1], "best_val_crps": best[0], "seed": config.seed,
        })
    return TrainResult(model, history, best[1], best[0], splits)
