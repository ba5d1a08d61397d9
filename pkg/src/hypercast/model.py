"""HyperCast forward pass: embedding, HSTB streams, view/timescale fusion, decoder.

Shapes use B (batch), N (stations), T (sequence), K (hyperedges), d (hidden).
Every block is a plain function over a flat ``{name: Parameter}`` store so the
same code serves training (under a Tape), evaluation, and gradient checks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

STREAMS = (("rec", "dist"), ("rec", "demd"), ("wek", "dist"), ("wek", "demd"))


class ConfigMismatchError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    N_s: int
    K: int
    T_r: int
    T_w: int
    T_f: int
    F_raw: int = 7
    d_h: int = 64
    L_HSTB: int = 3
    gat_heads: int = 8
    mhsa_heads: int = 8
    mhca_heads: int = 8
    N_dec: int = 2
    dropout: float = 0.1
    ffn_hidden: int | None = None
    positional_encoding: str = "sinusoidal"
    normalize_inputs: bool = True
    view_order: tuple[str, str] = ("dist", "demd")

    def __post_init__(self):
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.d_h)
        object.__setattr__(self, "view_order", tuple(self.view_order))
        for name in ("gat_heads", "mhsa_heads", "mhca_heads"):
            heads = getattr(self, name)
            if heads < 1 or self.d_h % heads:
                raise ValueError(f"d_h={self.d_h} is not divisible by {name}={heads}")
        if not 1 <= self.K <= max(self.N_s - 1, 1):
            raise ValueError(f"K={self.K} outside [1, N_s - 1] for N_s={self.N_s}")
        if self.positional_encoding not in ("none", "sinusoidal"):
            raise ValueError(f"unknown positional_encoding {self.positional_encoding!r}")
        if sorted(self.view_order) != ["demd", "dist"]:
            raise ValueError(f"view_order must be a permutation of (dist, demd), got {self.view_order}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if min(self.N_s, self.T_r, self.T_w, self.T_f, self.F_raw) < 1 or self.L_HSTB < 0 or self.N_dec < 0:
            raise ValueError("sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["view_order"] = list(self.view_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form count of learnable scalars (see README)."""
    d, f = cfg.d_h, cfg.ffn_hidden
    attn = 4 * d * d + 3 * d
    stel = attn + 2 * d * f + 5 * d + f
    gat = d * d + 4 * d
    hstb = 4 * cfg.L_HSTB * (gat + stel)
    embed = cfg.F_raw * d + d
    cvf = 2 * (2 * (d * d + d) + stel)
    ctf = attn + 2 * d
    dec = cfg.T_f * d + cfg.N_dec * (2 * attn + 2 * d * f + 7 * d + f)
    head = d + 1
    return embed + hstb + cvf + ctf + dec + head


# ---------------------------------------------------------------------------
# parameter construction


class ParamStore(dict):
    """Insertion-ordered ``name -> Parameter`` map with init helpers."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.rng = rng

    def add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self:
            raise ValueError(f"duplicate parameter name {name}")
        self[name] = Parameter(data, name)
        return self[name]

    def uniform(self, name: str, shape, fan_in: int) -> Parameter:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def linear(self, prefix: str, n_in: int, n_out: int) -> None:
        self.uniform(f"{prefix}.W", (n_in, n_out), n_in)
        self.uniform(f"{prefix}.b", (n_out,), n_in)

    def norm(self, prefix: str, d: int) -> None:
        self.add(f"{prefix}.gain", np.ones(d))
        self.add(f"{prefix}.bias", np.zeros(d))

    def attention(self, prefix: str, d: int) -> None:
        # no key bias: it shifts every logit of a query equally and cancels in the softmax
        self.linear(f"{prefix}.q", d, d)
        self.uniform(f"{prefix}.k.W", (d, d), d)
        self.linear(f"{prefix}.v", d, d)
        self.linear(f"{prefix}.o", d, d)

    def stel(self, prefix: str, d: int, hidden: int) -> None:
        self.attention(f"{prefix}.attn", d)
        self.norm(f"{prefix}.norm1", d)
        self.linear(f"{prefix}.ffn1", d, hidden)
        self.linear(f"{prefix}.ffn2", hidden, d)
        self.norm(f"{prefix}.norm2", d)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    P = ParamStore(np.random.default_rng(seed))
    d, hidden = cfg.d_h, cfg.ffn_hidden
    d_gat = d // cfg.gat_heads
    P.linear("embed", cfg.F_raw, d)
    for l in range(cfg.L_HSTB):
        for u, v in STREAMS:
            base = f"hstb.{l}.{u}.{v}"
            for h in range(cfg.gat_heads):
                P.uniform(f"{base}.gat.head{h}.W", (d, d_gat), d)
                P.uniform(f"{base}.gat.head{h}.a", (2 * d_gat,), 2 * d_gat)
            P.norm(f"{base}.gat.norm", d)
            P.stel(f"{base}.tte", d, hidden)
    for u in ("rec", "wek"):
        P.linear(f"cvf.{u}.embed", d, d)
        P.stel(f"cvf.{u}.stel", d, hidden)
        P.linear(f"cvf.{u}.out", d, d)
    P.attention("ctf.attn", d)
    P.norm("ctf.norm", d)
    P.add("dec.seed", P.rng.normal(0.0, 1.0, size=(cfg.T_f, d)))
    for l in range(cfg.N_dec):
        base = f"dec.{l}"
        P.attention(f"{base}.self", d)
        P.norm(f"{base}.norm1", d)
        P.attention(f"{base}.cross", d)
        P.norm(f"{base}.norm2", d)
        P.linear(f"{base}.ffn1", d, hidden)
        P.linear(f"{base}.ffn2", hidden, d)
        P.norm(f"{base}.norm3", d)
    P.linear("head", d, 1)
    return P


# ---------------------------------------------------------------------------
# attention trace


@dataclass
class AttentionRecord:
    weights: np.ndarray
    axes: tuple[str, ...]


class AttentionTrace(dict):
    """``site -> AttentionRecord``; sites are tuples such as ("gat", 0, "rec", "dist").

    ``extras`` holds auxiliary per-site arrays (the CTF path norms).
    """

    def __init__(self):
        super().__init__()
        self.extras: dict[tuple, np.ndarray] = {}
        self.meta: dict = {}

    def record(self, site: tuple, weights: np.ndarray, axes: Sequence[str]) -> None:
        self[site] = AttentionRecord(np.array(weights, copy=True), tuple(axes))

    def sites(self, kind: str) -> list[tuple]:
        return [s for s in self if s[0] == kind]


def site_label(site: tuple) -> str:
    return "/".join(str(x) for x in site)


# ---------------------------------------------------------------------------
# building blocks


@dataclass
class Ctx:
    """Per-forward switches threaded through the blocks."""

    training: bool = False
    rng: np.random.Generator | None = None
    dropout: float = 0.0
    trace: AttentionTrace | None = None

    def drop(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.dropout, self.rng, self.training)


def linear(P, prefix: str, x) -> Tensor:
    return ad.matmul(x, P[f"{prefix}.W"]) + P[f"{prefix}.b"]


def norm(P, prefix: str, x) -> Tensor:
    return ad.layer_norm(x, P[f"{prefix}.gain"], P[f"{prefix}.bias"])


def residual(P, prefix: str, x, y, ctx: Ctx) -> Tensor:
    """LN(x + Dropout(y))."""
    return norm(P, prefix, x + ctx.drop(y))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(*lead, S, d) -> (*lead, heads, S, d/heads)."""
    *lead, S, d = x.shape
    x = ad.reshape(x, (*lead, S, n_heads, d // n_heads))
    nl = len(lead)
    return ad.transpose(x, (*range(nl), nl + 1, nl, nl + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, S, dh = x.shape
    nl = len(lead)
    x = ad.transpose(x, (*range(nl), nl + 1, nl, nl + 2))
    return ad.reshape(x, (*lead, S, H * dh))


def multi_head_attention(P, prefix: str, q_in, kv_in, n_heads: int, mask=None):
    """Scaled dot-product attention; returns (output, weights (*lead, heads, Sq, Sk))."""
    Q = split_heads(linear(P, f"{prefix}.q", q_in), n_heads)
    K = split_heads(ad.matmul(kv_in, P[f"{prefix}.k.W"]), n_heads)
    V = split_heads(linear(P, f"{prefix}.v", kv_in), n_heads)
    d_head = Q.shape[-1]
    scores = ad.scale(ad.matmul(Q, ad.swapaxes(K, -1, -2)), 1.0 / np.sqrt(d_head))
    A = ad.softmax(scores) if mask is None else ad.masked_softmax(scores, mask)
    out = linear(P, f"{prefix}.o", merge_heads(ad.matmul(A, V)))
    return out, A.data


def stel(P, prefix: str, x, n_heads: int, ctx: Ctx, site=None, axes=None) -> Tensor:
    """Standard transformer encoder layer (post-norm, bidirectional)."""
    a, w = multi_head_attention(P, f"{prefix}.attn", x, x, n_heads)
    if ctx.trace is not None and site is not None:
        ctx.trace.record(site, w, axes)
    x = residual(P, f"{prefix}.norm1", x, a, ctx)
    f = linear(P, f"{prefix}.ffn2", ad.relu(linear(P, f"{prefix}.ffn1", x)))
    return residual(P, f"{prefix}.norm2", x, f, ctx)


def positional_encoding(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    div = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe


def embed_input(P, cfg: ModelConfig, X) -> Tensor:
    """Shared linear map F_raw -> d_h, plus fixed sinusoidal encodings over T."""
    X = ad.as_tensor(X)
    if X.ndim != 4 or X.shape[-1] != cfg.F_raw:
        raise ad.ShapeError(f"embed_input: expected (B, N, T, {cfg.F_raw}), got {X.shape}")
    Z = linear(P, "embed", X)
    if cfg.positional_encoding == "sinusoidal":
        Z = Z + positional_encoding(X.shape[2], cfg.d_h)
    return Z


def hs_gat(P, prefix: str, Z, H: np.ndarray, n_heads: int, ctx: Ctx, site=None) -> Tensor:
    """Node->hyperedge aggregation, attention among hyperedges, projection back, residual.

    Z: (B, N, T, d); H: (B, N, K) or (N, K).
    """
    B, N, T, d = Z.shape
    H = np.asarray(H, dtype=float)
    if H.ndim == 2:
        H = np.broadcast_to(H, (B,) + H.shape)
    if H.shape[:2] != (B, N):
        raise ad.ShapeError(f"hs_gat: incidence {H.shape} does not match features {Z.shape}")
    K = H.shape[2]
    d_head = d // n_heads

    Zt = ad.transpose(Z, (0, 2, 1, 3))  # (B, T, N, d)
    F = ad.matmul(np.swapaxes(H, 1, 2)[:, None], Zt)  # (B, T, K, d)
    W = ad.concat([P[f"{prefix}.head{h}.W"] for h in range(n_heads)], axis=-1)
    f = ad.matmul(F, W)
    f = ad.transpose(ad.reshape(f, (B, T, K, n_heads, d_head)), (0, 1, 3, 2, 4))  # (B, T, h, K, dh)
    a = ad.stack([P[f"{prefix}.head{h}.a"] for h in range(n_heads)], axis=0)  # (h, 2dh)
    a_self = ad.reshape(a[:, :d_head], (n_heads, d_head, 1))
    a_other = ad.reshape(a[:, d_head:], (n_heads, d_head, 1))
    e = ad.matmul(f, a_self) + ad.swapaxes(ad.matmul(f, a_other), -1, -2)  # (B, T, h, K, K)
    alpha = ad.softmax(ad.leaky_relu(e))
    if ctx.trace is not None and site is not None:
        ctx.trace.record(site, alpha.data, ("batch", "time", "head", "query", "key"))
    Fp = ad.matmul(alpha, f)  # (B, T, h, K, dh)
    Fp = ad.reshape(ad.transpose(Fp, (0, 1, 3, 2, 4)), (B, T, K, d))
    Zp = ad.matmul(H[:, None], Fp)  # (B, T, N, d)
    Zp = ad.transpose(Zp, (0, 2, 1, 3))
    return residual(P, f"{prefix}.norm", Z, Zp, ctx)


def tte(P, prefix: str, Z, n_heads: int, ctx: Ctx, site=None) -> Tensor:
    """Per-station temporal encoder over (B, N, T, d)."""
    return stel(P, prefix, Z, n_heads, ctx, site, ("batch", "station", "head", "query", "key"))


def hstb_stack(P, cfg: ModelConfig, Z_rec, Z_wek, H_dist, H_rec_demd, H_wek_demd, ctx: Ctx) -> dict:
    """Four independent streams of L_HSTB blocks; returns ``{(u, v): Z}``."""
    inputs = {"rec": Z_rec, "wek": Z_wek}
    incid = {
        ("rec", "dist"): H_dist,
        ("wek", "dist"): H_dist,
        ("rec", "demd"): H_rec_demd,
        ("wek", "demd"): H_wek_demd,
    }
    out = {}
    for u, v in STREAMS:
        Z = inputs[u]
        for l in range(cfg.L_HSTB):
            base = f"hstb.{l}.{u}.{v}"
            Z = hs_gat(P, f"{base}.gat", Z, incid[(u, v)], cfg.gat_heads, ctx, ("gat", l, u, v))
            Z = tte(P, f"{base}.tte", Z, cfg.mhsa_heads, ctx, ("tte", l, u, v))
        out[(u, v)] = Z
    return out


def cvf(P, cfg: ModelConfig, u: str, Z_by_view: dict, ctx: Ctx) -> Tensor:
    """Two view tokens per (b, p, t) through one encoder layer; keep the last token."""
    first, last = (Z_by_view[v] for v in cfg.view_order)
    B, N, T, d = first.shape
    if last.shape != first.shape:
        raise ad.ShapeError(f"cvf: view shapes differ {first.shape} vs {last.shape}")
    Z = ad.stack([first, last], axis=3)  # (B, N, T, 2, d)
    Z = linear(P, f"cvf.{u}.embed", Z)
    Z = stel(
        P, f"cvf.{u}.stel", Z, cfg.mhsa_heads, ctx, ("cvf", u),
        ("batch", "station", "time", "head", "query", "key"),
    )
    Z = ad.reshape(ad.index_select(Z, [1], axis=3), (B, N, T, d))
    return linear(P, f"cvf.{u}.out", Z)


def ctf(P, cfg: ModelConfig, Z_rec, Z_wek, ctx: Ctx) -> Tensor:
    """Recent queries attend to weekly keys/values; residual on the recent stream."""
    a, w = multi_head_attention(P, "ctf.attn", Z_rec, Z_wek, cfg.mhca_heads)
    if ctx.trace is not None:
        ctx.trace.record(("ctf",), w, ("batch", "station", "head", "query", "key"))
        ctx.trace.extras[("ctf",)] = np.stack(
            [np.linalg.norm(Z_rec.data, axis=-1), np.linalg.norm(a.data, axis=-1)], axis=-1
        )
    return residual(P, "ctf.norm", Z_rec, a, ctx)


def causal_mask(T: int) -> np.ndarray:
    """True above the diagonal: position i may attend to j <= i only."""
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def decoder(P, cfg: ModelConfig, Z_ctf, ctx: Ctx) -> Tensor:
    """Learnable target seed -> N_dec x (masked self-attn, cross-attn, FFN) -> d_h->1."""
    B, N = Z_ctf.shape[:2]
    tgt = ad.add(np.zeros((B, N, cfg.T_f, cfg.d_h)), P["dec.seed"])
    mask = causal_mask(cfg.T_f)
    axes = ("batch", "station", "head", "query", "key")
    for l in range(cfg.N_dec):
        base = f"dec.{l}"
        a, w = multi_head_attention(P, f"{base}.self", tgt, tgt, cfg.mhsa_heads, mask=mask)
        if ctx.trace is not None:
            ctx.trace.record(("dec_self", l), w, axes)
        tgt = residual(P, f"{base}.norm1", tgt, a, ctx)
        c, w = multi_head_attention(P, f"{base}.cross", tgt, Z_ctf, cfg.mhca_heads)
        if ctx.trace is not None:
            ctx.trace.record(("dec_cross", l), w, axes)
        tgt = residual(P, f"{base}.norm2", tgt, c, ctx)
        f = linear(P, f"{base}.ffn2", ad.relu(linear(P, f"{base}.ffn1", tgt)))
        tgt = residual(P, f"{base}.norm3", tgt, f, ctx)
    y = linear(P, "head", tgt)
    return ad.reshape(y, (B, N, cfg.T_f))


# ---------------------------------------------------------------------------
# model


class HyperCast:
    """Parameters, input normalization state, and the static distance hypergraph."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, H_dist: np.ndarray | None = None):
        self.cfg = cfg
        self.seed = seed
        self.params = init_params(cfg, seed)
        self.H_dist = None if H_dist is None else np.asarray(H_dist, dtype=float)
        self.demand_mean = np.zeros(cfg.N_s)
        self.demand_std = np.ones(cfg.N_s)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def fit_normalization(self, demand: np.ndarray) -> None:
        """Per-station mean/std from training demand (N_s, T) or (S, N_s, T)."""
        demand = np.asarray(demand, dtype=float)
        flat = np.moveaxis(demand, -2, 0).reshape(self.cfg.N_s, -1)
        self.demand_mean = flat.mean(axis=1)
        std = flat.std(axis=1)
        self.demand_std = np.where(std > 1e-12, std, 1.0)

    def normalize_demand(self, y: np.ndarray) -> np.ndarray:
        """Z-score (..., N_s, T) demand with the stored statistics."""
        if not self.cfg.normalize_inputs:
            return np.asarray(y, dtype=float)
        return (y - self.demand_mean[:, None]) / self.demand_std[:, None]

    def _normalize_input(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=float)
        if self.cfg.normalize_inputs:
            X[..., 0] = (X[..., 0] - self.demand_mean[:, None]) / self.demand_std[:, None]
        return X

    def forward(
        self,
        X_rec,
        X_wek,
        H_rec_demd,
        H_wek_demd,
        H_dist=None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        trace: AttentionTrace | None = None,
        denormalize: bool = True,
    ) -> Tensor:
        """Forecast (B, N_s, T_f).  With ``denormalize=False`` the output stays in
        z-scored units (what the trainer's loss uses)."""
        cfg, P = self.cfg, self.params
        H_dist = self.H_dist if H_dist is None else H_dist
        if H_dist is None:
            raise ValueError("no distance hypergraph: pass H_dist or set model.H_dist")
        X_rec, X_wek = np.asarray(X_rec, dtype=float), np.asarray(X_wek, dtype=float)
        exp_rec = (cfg.N_s, cfg.T_r, cfg.F_raw)
        exp_wek = (cfg.N_s, cfg.T_w, cfg.F_raw)
        if X_rec.shape[1:] != exp_rec or X_wek.shape[1:] != exp_wek:
            raise ad.ShapeError(
                f"inputs {X_rec.shape}/{X_wek.shape} do not match (B, {exp_rec}) / (B, {exp_wek})"
            )
        for name, H in (("H_dist", H_dist), ("H_rec_demd", H_rec_demd), ("H_wek_demd", H_wek_demd)):
            if np.shape(H)[-1] != cfg.K:
                raise ad.ShapeError(f"{name} has {np.shape(H)[-1]} hyperedges, model expects K={cfg.K}")
        ctx = Ctx(training=training, rng=rng, dropout=cfg.dropout, trace=trace)
        if trace is not None:
            trace.meta["view_order"] = tuple(cfg.view_order)
        Z_rec = embed_input(P, cfg, self._normalize_input(X_rec))
        Z_wek = embed_input(P, cfg, self._normalize_input(X_wek))
        streams = hstb_stack(P, cfg, Z_rec, Z_wek, H_dist, H_rec_demd, H_wek_demd, ctx)
        fused = {
            u: cvf(P, cfg, u, {v: streams[(u, v)] for v in ("dist", "demd")}, ctx)
            for u in ("rec", "wek")
        }
        Z = ctf(P, cfg, fused["rec"], fused["wek"], ctx)
        y = decoder(P, cfg, Z, ctx)
        if denormalize and cfg.normalize_inputs:
            y = y * self.demand_std[None, :, None] + self.demand_mean[None, :, None]
        return y

    __call__ = forward

    # -- checkpoints -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def save(self, path) -> tuple[Path, Path]:
        """Write ``path`` (parameter snapshot) and ``path.json`` (config + state)."""
        path = Path(path)
        ad.save_snapshot(path, self.state_arrays())
        sidecar = path.with_name(path.name + ".json")
        meta = {
            "model_config": self.cfg.to_dict(),
            "seed": self.seed,
            "demand_mean": self.demand_mean.tolist(),
            "demand_std": self.demand_std.tolist(),
            "H_dist": None if self.H_dist is None else self.H_dist.tolist(),
        }
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path, sidecar

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            name = sorted(missing or extra)[0]
            raise ConfigMismatchError(name, f"checkpoint parameter set differs from config at {name}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ConfigMismatchError(
                    name, f"parameter {name} has shape {arrays[name].shape}, config implies {p.shape}"
                )
            p.data[...] = arrays[name]

    @classmethod
    def load(cls, path, expected: ModelConfig | None = None) -> "HyperCast":
        """Load a checkpoint; with ``expected``, every config field must agree."""
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        cfg = ModelConfig.from_dict(meta["model_config"])
        if expected is not None:
            for f in fields(ModelConfig):
                a, b = getattr(expected, f.name), getattr(cfg, f.name)
                if a != b:
                    raise ConfigMismatchError(
                        f.name, f"config field {f.name}: run config has {a!r}, checkpoint has {b!r}"
                    )
        model = cls(cfg, seed=meta.get("seed", 0))
        model.load_state(ad.load_snapshot(path))
        model.demand_mean = np.asarray(meta["demand_mean"], dtype=float)
        model.demand_std = np.asarray(meta["demand_std"], dtype=float)
        if meta.get("H_dist") is not None:
            model.H_dist = np.asarray(meta["H_dist"], dtype=float)
        return model
