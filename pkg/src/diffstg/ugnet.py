"""UGnet: the noise-prediction network.

Layout inside the network is channels-last, ``[B, V, L, C]`` with L the
temporal length. Public entry points take the ``[F, V, T]`` (or batched
``[B, F, V, T]``) layout used by the diffusion code.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .graph import Graph, graph_conv


@dataclass(frozen=True)
class UGnetConfig:
    V: int
    F: int = 1
    T: int = 24
    C: int = 32
    K: int = 3
    depth: int = 2
    D_embed: int = 64
    channel_growth: bool = False
    gcn_activation: str = "identity"
    use_gcn: bool = True
    use_tcn: bool = True
    use_u: bool = True

    def __post_init__(self):
        if self.D_embed % 2:
            raise ValueError(f"D_embed must be even, got {self.D_embed}")
        if min(self.V, self.F, self.T, self.C, self.K) < 1 or self.depth < 0:
            raise ValueError(f"invalid UGnet dimensions: {self}")
        if self.gcn_activation not in ("identity", "relu"):
            raise ValueError(f"gcn_activation must be identity or relu, got {self.gcn_activation!r}")

    @property
    def levels(self) -> int:
        return self.depth if self.use_u else 0

    @property
    def pad(self) -> int:
        """Zeros prepended to the 2T concatenated axis so it halves cleanly ``levels`` times."""
        return (-2 * self.T) % (2 ** self.levels)

    def length(self, level: int) -> int:
        return (2 * self.T + self.pad) // 2 ** level

    def channels(self, level: int) -> int:
        return self.C * 2 ** level if self.channel_growth else self.C


def noise_embedding(n, D_embed: int, r: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of diffusion step(s) ``n``: interleaved (cos, sin) pairs.

    Pair d (d = 1..D/2) uses angular frequency r^(-2d/D). Returns shape
    ``[D]`` for scalar n or ``[len(n), D]``.
    """
    if D_embed % 2:
        raise ValueError(f"D_embed must be even, got {D_embed}")
    n_arr = np.atleast_1d(np.asarray(n, dtype=np.float64))
    if np.any(n_arr < 1):
        raise ValueError("diffusion step must be >= 1")
    d = np.arange(1, D_embed // 2 + 1)
    angle = n_arr[:, None] * r ** (-2.0 * d / D_embed)[None, :]
    out = np.empty((n_arr.size, D_embed))
    out[:, 0::2] = np.cos(angle)
    out[:, 1::2] = np.sin(angle)
    return out[0] if np.ndim(n) == 0 else out


def gated_tcn(H: T.Tensor, Wp: T.Tensor, Wq: T.Tensor, bp: T.Tensor | None = None,
              bq: T.Tensor | None = None) -> T.Tensor:
    """Gated causal convolution P * sigmoid(Q) over axis -2 of ``H = [..., L, C_in]``.

    ``Wp``/``Wq`` are ``[K, C_in, C_out]`` kernels; padding K-1 keeps the length.
    """
    if Wp.shape != Wq.shape:
        raise T.ShapeError(f"gated_tcn: P kernel {list(Wp.shape)} and Q kernel {list(Wq.shape)} differ")
    cout = Wp.shape[2]
    PQ = T.causal_conv1d(H, T.concat([Wp, Wq], axis=2))
    if bp is not None:
        PQ = T.add(PQ, _expand_bias(T.concat([bp, bq], axis=0), PQ.shape))
    P, Q = T.split(PQ, [cout, cout], axis=-1)
    return T.mul(P, T.sigmoid(Q))


def _expand_bias(b: T.Tensor, shape) -> T.Tensor:
    return T.broadcast_to(T.reshape(b, (1,) * (len(shape) - 1) + (b.shape[0],)), shape)


def init_params(config: UGnetConfig, seed: int = 0, dtype=None) -> dict[str, T.Tensor]:
    rng = np.random.default_rng(seed)
    K, D, F = config.K, config.D_embed, config.F
    params: dict[str, np.ndarray] = {}

    def dense(name, fan_in, shape):
        params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    def zeros(name, shape):
        params[name] = np.zeros(shape)

    def tcn(prefix, cin, cout):
        if config.use_tcn:
            dense(f"{prefix}.Wp", K * cin, (K, cin, cout))
            dense(f"{prefix}.Wq", K * cin, (K, cin, cout))
            zeros(f"{prefix}.bp", (cout,))
            zeros(f"{prefix}.bq", (cout,))
        else:
            dense(f"{prefix}.W", cin, (1, cin, cout))
            zeros(f"{prefix}.b", (cout,))

    def block(prefix, level):
        c, L = config.channels(level), config.length(level)
        dense(f"{prefix}.emb.W", D, (D, c))
        zeros(f"{prefix}.emb.b", (c,))
        tcn(f"{prefix}.tcn", c, c)
        dense(f"{prefix}.gcn.W", L * c, (L * c, L * c))

    dense("in.W", F, (F, config.C))
    zeros("in.b", (config.C,))
    if config.levels == 0:
        block("mid", 0)
    for i in range(config.levels):
        block(f"down{i}", i)
        if config.channels(i + 1) != config.channels(i):
            dense(f"down{i}.proj", config.channels(i), (config.channels(i), config.channels(i + 1)))
    for j in reversed(range(config.levels)):
        tcn(f"up{j}.smooth", config.channels(j + 1), config.channels(j))
        block(f"up{j}", j)
    dense("out.W", config.C, (config.C, F))
    zeros("out.b", (F,))
    return {k: T.Tensor(v, requires_grad=True, dtype=dtype, name=k) for k, v in params.items()}


def _temporal(H, params, prefix, config):
    if config.use_tcn:
        return gated_tcn(H, params[f"{prefix}.Wp"], params[f"{prefix}.Wq"],
                         params[f"{prefix}.bp"], params[f"{prefix}.bq"])
    out = T.causal_conv1d(H, params[f"{prefix}.W"])
    return T.add(out, _expand_bias(params[f"{prefix}.b"], out.shape))


def _st_block(H, emb, params, prefix, graph, config):
    try:
        return _st_block_inner(H, emb, params, prefix, graph, config)
    except (T.ShapeError, KeyError) as exc:
        raise T.ShapeError(f"UGnet block {prefix!r}: {exc}") from None


def _st_block_inner(H, emb, params, prefix, graph, config):
    B, V, L, C = H.shape
    e = T.add(T.matmul(emb, params[f"{prefix}.emb.W"]), _expand_bias(params[f"{prefix}.emb.b"], (B, C)))
    H = T.add(H, T.broadcast_to(T.reshape(e, (B, 1, 1, C)), H.shape))
    Hbar = _temporal(H, params, f"{prefix}.tcn", config)
    G = graph_conv(T.reshape(Hbar, (B, V, L * C)), graph, params[f"{prefix}.gcn.W"],
                   activation=config.gcn_activation, aggregate=config.use_gcn)
    return T.add(H, T.reshape(G, (B, V, L, C)))


def ugnet_forward(x_n, x_msk, n, graph: Graph, params: dict[str, T.Tensor],
                  config: UGnetConfig) -> T.Tensor:
    """Predict the noise in ``x_n`` given the masked condition ``x_msk``.

    Both inputs are ``[F, V, T]`` or ``[B, F, V, T]``; ``n`` is an int or one
    step per batch entry. The condition is placed first on the doubled time
    axis so causal convolutions at the x_n positions can see it, and the
    prediction is read off the last T positions.
    """
    x_n, x_msk = T._as_tensor(x_n), T._as_tensor(x_msk)
    squeeze = x_n.ndim == 3
    if squeeze:
        x_n, x_msk = T.reshape(x_n, (1,) + x_n.shape), T.reshape(x_msk, (1,) + x_msk.shape)
    if x_n.shape != x_msk.shape:
        raise T.ShapeError(f"ugnet input: x_n {list(x_n.shape)} vs condition {list(x_msk.shape)}")
    B, F, V, T_len = x_n.shape
    if (F, V, T_len) != (config.F, config.V, config.T):
        raise T.ShapeError(f"ugnet input: got F,V,T = {F},{V},{T_len}, "
                           f"config expects {config.F},{config.V},{config.T}")
    if graph.V != V:
        raise T.ShapeError(f"ugnet input: graph has {graph.V} nodes, data has {V}")
    steps = np.broadcast_to(np.asarray(n), (B,))
    emb = T.Tensor(noise_embedding(steps, config.D_embed), dtype=x_n.dtype)

    x = T.concat([x_msk, x_n], axis=3)                                  # [B, F, V, 2T]
    if config.pad:
        x = T.concat([T.Tensor(np.zeros((B, F, V, config.pad)), dtype=x.dtype), x], axis=3)
    x = T.transpose(x, (0, 2, 3, 1))                                    # [B, V, L, F]
    H = T.matmul(x, params["in.W"])
    H = T.add(H, _expand_bias(params["in.b"], H.shape))

    if config.levels == 0:
        H = _st_block(H, emb, params, "mid", graph, config)
    skips = []
    for i in range(config.levels):
        H = _st_block(H, emb, params, f"down{i}", graph, config)
        skips.append(H)
        H = T.subsample(H, axis=2, stride=2)
        if f"down{i}.proj" in params:
            H = T.matmul(H, params[f"down{i}.proj"])
    for j in reversed(range(config.levels)):
        H = T.repeat(H, 2, axis=2)
        H = _temporal(H, params, f"up{j}.smooth", config)
        H = T.add(H, skips[j])
        H = _st_block(H, emb, params, f"up{j}", graph, config)

    out = T.matmul(H, params["out.W"])
    out = T.add(out, _expand_bias(params["out.b"], out.shape))          # [B, V, L, F]
    L = out.shape[2]
    out = T.slice_axis(out, L - T_len, L, axis=2)
    out = T.transpose(out, (0, 3, 1, 2))                                # [B, F, V, T]
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


class UGnet:
    """Callable denoiser bundling a config with its parameters."""

    def __init__(self, config: UGnetConfig, params: dict[str, T.Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed=seed)

    def __call__(self, x_n, x_msk, n, graph: Graph) -> T.Tensor:
        return ugnet_forward(x_n, x_msk, n, graph, self.params, self.config)

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data[...] = v

    def astype(self, dtype) -> "UGnet":
        params = {k: T.Tensor(v.data, requires_grad=True, dtype=dtype, name=k) for k, v in self.params.items()}
        return UGnet(self.config, params)

    def save(self, directory: str | Path, extra: dict | None = None) -> Path:
        """Write one tensor file pair per parameter plus ``manifest.json``."""
        directory = Path(directory)
        (directory / "tensors").mkdir(parents=True, exist_ok=True)
        files = {}
        for name, p in self.params.items():
            T.save_tensor(p, directory / "tensors" / name)
            files[name] = f"tensors/{name}"
        manifest = {"config": asdict(self.config), "tensors": files}
        if extra:
            manifest.update(extra)
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, directory: str | Path, dtype=None) -> tuple["UGnet", dict]:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        config = UGnetConfig(**manifest["config"])
        expected = init_params(config)
        params = {}
        for name, rel in manifest["tensors"].items():
            t = T.load_tensor(directory / rel, dtype=dtype)
            if name not in expected or expected[name].shape != t.shape:
                raise ValueError(f"checkpoint tensor {name!r} with shape {list(t.shape)} "
                                 f"does not fit config {config}")
            t.requires_grad = True
            t.name = name
            params[name] = t
        missing = set(expected) - set(params)
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {sorted(missing)}")
        return cls(config, params), manifest
