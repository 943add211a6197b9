"""Command-line entry point: ``diffstg {synth,train,evaluate,bench-sampling}``.

Every command accepts ``--config FILE``, ``--seed N``, ``--out DIR`` and any
config key as a dotted override (``--diffusion.N 100``). The effective
configuration, seed included, is written to ``<out>/config.txt``.

evaluate writes ``report.csv`` with columns
    method,split,horizon,S,k,M,mode,crps,mae,rmse,crps_raw,mae_raw,rmse_raw,count
(one row per horizon plus a ``horizon=all`` summary; CRPS/MAE/RMSE in
standardized units, ``*_raw`` in data units) and ``band_window<i>.csv`` with
    node,horizon,truth,mean,p5,p25,p75,p95
for every test window listed in ``eval.windows``.

bench-sampling writes ``timing.csv`` with columns
    M,k,S,trajectories,median_seconds,speedup_vs_max_M
"""
from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .config import DEFAULTS, PROFILES, ConfigError, RunConfig
from .data import (STGDataset, SyntheticSpec, chronological_split, destandardize, generate_synthetic, load_csv,
                   persistence_ensemble, read_oracle_csv, window_batch, window_starts, write_synthetic)
from .diffusion import SamplerConfig, WindowBatch, sample_ensembles
from .metrics import band_quantiles, evaluate, evaluate_gaussian
from .schedule import make_schedule
from .trainer import TrainConfig, train
from .ugnet import UGnet, UGnetConfig

log = logging.getLogger("diffstg")

REPORT_COLUMNS = ["method", "split", "horizon", "S", "k", "M", "mode", "crps", "mae", "rmse",
                  "crps_raw", "mae_raw", "rmse_raw", "count"]


def _split_overrides(tokens: list[str]) -> dict[str, str]:
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        if key not in DEFAULTS:
            raise ConfigError(f"unknown option --{key}")
        out[key] = value
    return out


def _prepare(args, extra) -> tuple[RunConfig, Path]:
    cfg = RunConfig.build(args.config, _split_overrides(extra), getattr(args, "profile", None))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# command: {args.command}\nseed = {args.seed}\n" + cfg.dump())
    return cfg, out


def model_config(cfg: RunConfig, V: int, F: int) -> UGnetConfig:
    return UGnetConfig(V=V, F=F, T=cfg["data.T_h"] + cfg["data.T_p"], C=cfg["ugnet.C"], K=cfg["ugnet.K"],
                       depth=cfg["ugnet.depth"], D_embed=cfg["ugnet.D_embed"],
                       channel_growth=cfg["ugnet.channel_growth"], gcn_activation=cfg["ugnet.gcn_activation"],
                       use_gcn=cfg["ugnet.use_gcn"], use_tcn=cfg["ugnet.use_tcn"], use_u=cfg["ugnet.use_u"])


def train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    return TrainConfig(batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
                       lr_halving_every=cfg["train.lr_halving_every"], patience=cfg["train.patience"],
                       max_epochs=cfg["train.max_epochs"], seed=seed, N=cfg["diffusion.N"],
                       beta_1=cfg["diffusion.beta_1"], beta_N=cfg["diffusion.beta_N"],
                       schedule=cfg["diffusion.schedule"], val_S=cfg["train.val_S"],
                       val_windows=cfg["train.val_windows"], steps_per_epoch=cfg["train.steps_per_epoch"],
                       clip_norm=cfg["train.clip_norm"], future_only=cfg["loss.future_only"],
                       T_h=cfg["data.T_h"], T_p=cfg["data.T_p"], stride=cfg["data.stride"],
                       time_budget=cfg["train.time_budget"])


def sampler_config(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig(S=cfg["sample.S"], k=cfg["sample.k"], M=cfg["sample.M"] or None,
                         mode=cfg["sample.mode"], eta=cfg["sample.eta"])


def _load_dataset(cfg: RunConfig) -> STGDataset:
    for key in ("data.signals", "data.adjacency"):
        if not cfg[key]:
            raise ConfigError(f"{key} is required")
        if not Path(cfg[key]).is_file():
            raise ConfigError(f"{key}: no such file {cfg[key]!r}")
    return load_csv(cfg["data.signals"], cfg["data.adjacency"])


def _load_checkpoint(path) -> tuple[UGnet, dict]:
    path = Path(path)
    if (path / "checkpoint" / "manifest.json").is_file():
        path = path / "checkpoint"
    if not (path / "manifest.json").is_file():
        raise ConfigError(f"no checkpoint manifest under {path}")
    return UGnet.load(path)


def _check_dims(model: UGnet, dataset: STGDataset, T_win: int) -> None:
    c = model.config
    if (c.V, c.F, c.T) != (dataset.V, dataset.F, T_win):
        raise ConfigError(f"checkpoint expects V={c.V}, F={c.F}, T={c.T} but dataset gives "
                          f"V={dataset.V}, F={dataset.F}, T={T_win}")


def _schedule_from_manifest(manifest: dict):
    s = manifest["schedule"]
    return make_schedule(s["kind"], s["N"], s["beta_1"], s["beta_N"])


def _spread_count(n: int, count: int) -> np.ndarray:
    if count <= 0 or count >= n:
        return np.arange(n)
    return np.linspace(0, n - 1, count).round().astype(int)


# -- commands ---------------------------------------------------------------------------

def cmd_synth(args, extra) -> int:
    if args.seed is None:
        raise ConfigError("synth needs an explicit --seed so the data can be regenerated")
    cfg, out = _prepare(args, extra)
    spec = SyntheticSpec(V=cfg["synth.V"], rho=cfg["synth.rho"], lam=cfg["synth.lam"],
                         noise=cfg["synth.noise"], length=cfg["synth.length"])
    dataset = generate_synthetic(spec, args.seed)
    paths = write_synthetic(dataset, out, T_p=cfg["data.T_p"])
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_train(args, extra) -> int:
    cfg, out = _prepare(args, extra)
    dataset = _load_dataset(cfg)
    mcfg = model_config(cfg, dataset.V, dataset.F)
    result = train(dataset, train_config(cfg, args.seed), mcfg, out_dir=out)
    log.info("best epoch %d, validation CRPS %.4f", result.best_epoch, result.best_val_crps)
    return 0


def cmd_evaluate(args, extra) -> int:
    cfg, out = _prepare(args, extra)
    dataset = _load_dataset(cfg)
    model, manifest = _load_checkpoint(args.checkpoint)
    T_h, T_p = manifest["data"]["T_h"], manifest["data"]["T_p"]
    _check_dims(model, dataset, T_h + T_p)
    schedule = _schedule_from_manifest(manifest)
    train_rows, _, test_rows = chronological_split(dataset.T_total, window=T_h + T_p)
    dataset.fit_scaler(train_rows)
    all_starts = window_starts(test_rows, T_h + T_p)

    band_ids = [int(x) for x in str(cfg["eval.windows"]).split(",") if x.strip()]
    for i in band_ids:
        if not 0 <= i < len(all_starts):
            raise IndexError(f"window index {i} outside the test split (0..{len(all_starts) - 1})")
    chosen = np.union1d(_spread_count(len(all_starts), cfg["eval.max_windows"]), band_ids).astype(int)
    batch, starts = window_batch(dataset, test_rows, T_h, T_p, starts=all_starts[chosen])
    scfg = sampler_config(cfg)
    samples, _ = sample_ensembles(model, batch, schedule, scfg, seed=args.seed, streams=chosen, T_h=T_h)
    truth = batch.x_all[..., T_h:]
    stats = dataset.norm_stats
    M = (scfg.M or schedule.N) if scfg.mode == "ddim" else schedule.N

    results = {"diffstg": evaluate(samples, truth, stats)}
    z_train = dataset.scaler.transform(dataset.signals[train_rows.start:train_rows.stop])
    rng = np.random.default_rng([args.seed, 1])
    results["persistence"] = evaluate(persistence_ensemble(batch, z_train, T_h, scfg.S, rng), truth, stats)
    if cfg["data.oracle"]:
        mean, std = _oracle_moments(cfg["data.oracle"], starts, T_h, stats)
        results["oracle"] = evaluate_gaussian(mean, std, truth, stats)

    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for method, rep in results.items():
            head = [method, "test"]
            cfg_cols = [scfg.S, scfg.k, M, scfg.mode]
            for h in range(T_p):
                w.writerow(head + [h + 1] + cfg_cols + [rep.crps_h[h], rep.mae_h[h], rep.rmse_h[h],
                                                        rep.raw.crps_h[h], rep.raw.mae_h[h], rep.raw.rmse_h[h],
                                                        rep.count // T_p])
            w.writerow(head + ["all"] + cfg_cols + [rep.crps, rep.mae, rep.rmse,
                                                     rep.raw.crps, rep.raw.mae, rep.raw.rmse, rep.count])

    raw_samples = destandardize(samples, stats)
    raw_truth = destandardize(truth, stats)
    for i in band_ids:
        j = int(np.searchsorted(chosen, i))
        q = band_quantiles(raw_samples[:, j, 0])                        # [4, V, T_p]
        mean = raw_samples[:, j, 0].mean(axis=0)
        with (out / f"band_window{i}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "horizon", "truth", "mean", "p5", "p25", "p75", "p95"])
            for v in range(dataset.V):
                for h in range(T_p):
                    w.writerow([v, h + 1, raw_truth[j, 0, v, h], mean[v, h], *q[:, v, h]])
    for method, rep in results.items():
        log.info("%s: CRPS %.4f MAE %.4f RMSE %.4f (standardized)", method, rep.crps, rep.mae, rep.rmse)
    return 0


def _oracle_moments(path, starts, T_h, stats) -> tuple[np.ndarray, np.ndarray]:
    """Standardized oracle mean and std ``[W, 1, V, T_p]`` for windows starting at ``starts``."""
    t_last, mean, std = read_oracle_csv(path)
    lookup = {int(t): i for i, t in enumerate(t_last)}
    try:
        rows = [lookup[int(s) + T_h - 1] for s in starts]
    except KeyError as exc:
        raise ConfigError(f"oracle file has no row for t_last={exc.args[0]}") from None
    mu, scale = stats[0][:, 0], stats[1][:, 0]
    m = (mean[rows] - mu) / scale                                      # [W, T_p, V]
    sd = std[rows] / scale
    return np.transpose(m, (0, 2, 1))[:, None], np.transpose(sd, (0, 2, 1))[:, None]


def cmd_bench_sampling(args, extra) -> int:
    cfg, out = _prepare(args, extra)
    dataset = _load_dataset(cfg)
    model, manifest = _load_checkpoint(args.checkpoint)
    T_h, T_p = manifest["data"]["T_h"], manifest["data"]["T_p"]
    _check_dims(model, dataset, T_h + T_p)
    schedule = _schedule_from_manifest(manifest)
    train_rows, _, test_rows = chronological_split(dataset.T_total, window=T_h + T_p)
    dataset.fit_scaler(train_rows)
    starts = window_starts(test_rows, T_h + T_p)[:cfg["bench.windows"]]
    batch, _ = window_batch(dataset, test_rows, T_h, T_p, starts=starts)
    rows = bench_sampling(model, batch, schedule, cfg.ints("bench.M"), cfg.ints("bench.k"),
                          cfg.ints("bench.S"), cfg["bench.repeats"], seed=args.seed, T_h=T_h)
    with (out / "timing.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["M", "k", "S", "trajectories", "median_seconds", "speedup_vs_max_M"])
        w.writeheader()
        w.writerows(rows)
    return 0


def bench_sampling(model, batch: WindowBatch, schedule, Ms, ks, Ss, repeats: int = 5, seed: int = 0,
                   T_h: int = 12) -> list[dict]:
    """Median wall-clock of ensemble sampling for every (M, k, S) grid point with k <= S."""
    rows = []
    for S in Ss:
        for k in ks:
            if k > S:
                continue
            for M in Ms:
                scfg = SamplerConfig(S=S, k=k, M=M, mode="ddim")
                times = []
                for r in range(repeats):
                    t0 = time.perf_counter()
                    sample_ensembles(model, batch, schedule, scfg, seed=seed + r, T_h=T_h)
                    times.append(time.perf_counter() - t0)
                rows.append({"M": M, "k": k, "S": S, "trajectories": scfg.n_trajectories,
                             "median_seconds": statistics.median(times)})
    for row in rows:
        ref = [r for r in rows if r["k"] == row["k"] and r["S"] == row["S"]]
        slowest = max(ref, key=lambda r: r["M"])
        row["speedup_vs_max_M"] = slowest["median_seconds"] / row["median_seconds"]
    return rows


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "bench-sampling": cmd_bench_sampling}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffstg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} (dotted config keys accepted as --section.key VALUE)")
        p.add_argument("--config", help="flat 'section.key = value' config file")
        p.add_argument("--seed", type=int, default=None if name == "synth" else 0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--profile", choices=sorted(PROFILES), help="preset for quick CPU runs")
        if name in ("evaluate", "bench-sampling"):
            p.add_argument("--checkpoint", required=True, help="training output or checkpoint directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return COMMANDS[args.command](args, extra)
    except (ConfigError, IndexError) as exc:
        print(f"diffstg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
