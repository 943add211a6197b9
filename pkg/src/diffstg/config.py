"""Flat ``section.key = value`` run configuration."""
from __future__ import annotations

from pathlib import Path

# key -> (type, default)
DEFAULTS: dict[str, tuple[type, object]] = {
    "data.signals": (str, ""),
    "data.adjacency": (str, ""),
    "data.oracle": (str, ""),
    "data.T_h": (int, 12),
    "data.T_p": (int, 12),
    "data.stride": (int, 1),
    "diffusion.N": (int, 100),
    "diffusion.beta_1": (float, 1e-4),
    "diffusion.beta_N": (float, 0.2),
    "diffusion.schedule": (str, "quadratic"),
    "ugnet.C": (int, 32),
    "ugnet.K": (int, 3),
    "ugnet.depth": (int, 2),
    "ugnet.D_embed": (int, 64),
    "ugnet.channel_growth": (bool, False),
    "ugnet.gcn_activation": (str, "identity"),
    "ugnet.use_gcn": (bool, True),
    "ugnet.use_tcn": (bool, True),
    "ugnet.use_u": (bool, True),
    "loss.future_only": (bool, False),
    "train.batch_size": (int, 8),
    "train.lr": (float, 0.002),
    "train.lr_halving_every": (int, 5),
    "train.patience": (int, 10),
    "train.max_epochs": (int, 50),
    "train.steps_per_epoch": (int, 0),
    "train.val_S": (int, 4),
    "train.val_windows": (int, 64),
    "train.clip_norm": (float, 1.0),
    "train.time_budget": (float, 0.0),
    "sample.S": (int, 8),
    "sample.k": (int, 1),
    "sample.M": (int, 0),
    "sample.mode": (str, "ddpm"),
    "sample.eta": (float, 1.0),
    "eval.max_windows": (int, 0),
    "eval.windows": (str, ""),
    "synth.V": (int, 8),
    "synth.rho": (float, 0.9),
    "synth.lam": (float, 0.4),
    "synth.noise": (float, 1.0),
    "synth.length": (int, 20000),
    "bench.M": (str, "20,40,100"),
    "bench.k": (str, "1,2"),
    "bench.S": (str, "8,16,32"),
    "bench.repeats": (int, 5),
    "bench.windows": (int, 1),
}

PROFILES: dict[str, dict[str, object]] = {
    "tiny": {
        "ugnet.C": 16,
        "diffusion.N": 50,
        "diffusion.beta_N": 0.3,
        "train.steps_per_epoch": 400,
        "train.max_epochs": 40,
        "train.val_windows": 48,
        "train.time_budget": 420.0,
        "eval.max_windows": 256,
    },
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw) -> object:
    typ = DEFAULTS[key][0]
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


class RunConfig(dict):
    """Defaults, then profile, then config file, then command-line overrides."""

    @classmethod
    def build(cls, path: str | Path | None = None, overrides: dict[str, object] | None = None,
              profile: str | None = None) -> "RunConfig":
        cfg = cls({k: d for k, (_, d) in DEFAULTS.items()})
        if profile:
            if profile not in PROFILES:
                raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
            cfg.update(PROFILES[profile])
        if path:
            cfg.update(parse_config_text(Path(path).read_text(), str(path)))
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            cfg[key] = _coerce(key, value)
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.items()))

    def ints(self, key: str) -> list[int]:
        return [int(x) for x in str(self[key]).split(",") if x.strip()]
