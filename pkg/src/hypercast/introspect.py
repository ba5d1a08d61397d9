"""Analyses over recorded attention: hyperedges, OOD time steps, fusion shares.

"Received attention" at a site is the column mass of its row-stochastic
attention matrix (sum over queries), averaged uniformly over every other axis.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .hypergraph import geodesic_distances
from .model import AttentionTrace, site_label

COMPACTNESS_EPS_KM = 1e-6


class IntrospectionError(KeyError):
    pass


@dataclass
class HyperedgeStats:
    received_attention: np.ndarray  # (K,)
    mean_variance: np.ndarray  # (K,), NaN where undefined
    compactness: np.ndarray  # (K,) in [0, 1]


@dataclass
class TemporalAttnSplit:
    ood_mean: float | None
    wd_mean: float | None
    n_ood: int
    n_wd: int


def _record(trace: AttentionTrace, site: tuple):
    if site not in trace:
        raise IntrospectionError(f"site {site_label(site)} not present in trace")
    return trace[site]


def _received(weights: np.ndarray, axes: Sequence[str]) -> np.ndarray:
    """Column sums over the query axis, keeping the key axis last."""
    return weights.sum(axis=list(axes).index("query"))


def hyperedge_received_attention(trace: AttentionTrace, site: tuple) -> np.ndarray:
    """K-vector of column sums of the hyperedge attention, averaged over batch/time/head."""
    if site[0] != "gat":
        raise IntrospectionError(f"{site_label(site)} is not a hyperedge attention site")
    rec = _record(trace, site)
    col = _received(rec.weights, rec.axes)
    return col.reshape(-1, col.shape[-1]).mean(axis=0)


def hyperedge_demand_variance(demand, H) -> np.ndarray:
    """Membership-weighted mean of per-station demand variance; NaN for an all-zero column."""
    demand = np.asarray(getattr(demand, "demand", demand), dtype=float)
    H = np.asarray(H, dtype=float)
    var = demand.var(axis=1)
    mass = H.sum(axis=0)
    out = np.full(H.shape[1], np.nan)
    ok = mass > 0
    out[ok] = (H[:, ok] * var[:, None]).sum(axis=0) / mass[ok]
    return out


def hyperedge_compactness(coords, H) -> np.ndarray:
    """Inverse membership-weighted mean pairwise distance, min-max scaled to [0, 1].

    K=1 and all-equal spreads map to 1.0.
    """
    H = np.asarray(H, dtype=float)
    D = geodesic_distances(coords)
    off = ~np.eye(len(D), dtype=bool)
    K = H.shape[1]
    spread = np.zeros(K)
    for k in range(K):
        w = np.outer(H[:, k], H[:, k])[off]
        spread[k] = 0.0 if w.sum() == 0 else (w * D[off]).sum() / w.sum()
    inv = 1.0 / (COMPACTNESS_EPS_KM + spread)
    lo, hi = inv.min(), inv.max()
    if K == 1 or hi == lo:
        return np.ones(K)
    return (inv - lo) / (hi - lo)


def hyperedge_stats(trace: AttentionTrace, site: tuple, demand, coords, H) -> HyperedgeStats:
    return HyperedgeStats(
        hyperedge_received_attention(trace, site),
        hyperedge_demand_variance(demand, H),
        hyperedge_compactness(coords, H),
    )


def ood_split(series) -> tuple[np.ndarray, np.ndarray]:
    """Three-sigma rule on the window's own mean and population std."""
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 3:
        raise ValueError(f"ood_split needs at least 3 points, got {x.size}")
    idx = np.arange(x.size)
    std = x.std()
    if std == 0.0:
        return idx[:0], idx
    ood = np.abs(x - x.mean()) > 3.0 * std
    return idx[ood], idx[~ood]


def temporal_received_attention(trace: AttentionTrace, timescale: str) -> np.ndarray:
    """(B, N, T): attention received per time step, averaged over heads, blocks, views."""
    sites = [s for s in trace.sites("tte") if s[2] == timescale]
    if not sites:
        raise IntrospectionError(f"no temporal attention sites for timescale {timescale!r}")
    total = None
    for s in sites:
        rec = trace[s]
        col = _received(rec.weights, rec.axes)  # (B, N, head, T)
        col = col.mean(axis=rec.axes.index("head"))
        total = col if total is None else total + col
    return total / len(sites)


def temporal_attention_split(
    trace: AttentionTrace, windows: Mapping[str, np.ndarray]
) -> dict[str, TemporalAttnSplit]:
    """Mean received temporal attention over OOD vs within-distribution steps.

    ``windows`` maps timescale ("rec"/"wek") to the (B, N, T) demand inputs of
    the traced forward pass.  Windows shorter than 3 steps are reported as
    undefined (None means, zero counts).
    """
    out = {}
    for u, demand in windows.items():
        received = temporal_received_attention(trace, u)
        demand = np.asarray(demand, dtype=float)
        if demand.shape != received.shape:
            raise ValueError(f"{u}: demand windows {demand.shape} vs attention {received.shape}")
        if demand.shape[-1] < 3:
            out[u] = TemporalAttnSplit(None, None, 0, 0)
            continue
        ood_vals, wd_vals = [], []
        for b in range(demand.shape[0]):
            for p in range(demand.shape[1]):
                ood, wd = ood_split(demand[b, p])
                ood_vals.append(received[b, p, ood])
                wd_vals.append(received[b, p, wd])
        ood_all = np.concatenate(ood_vals)
        wd_all = np.concatenate(wd_vals)
        out[u] = TemporalAttnSplit(
            float(ood_all.mean()) if ood_all.size else None,
            float(wd_all.mean()) if wd_all.size else None,
            int(ood_all.size),
            int(wd_all.size),
        )
    return out


def fusion_attention_shares(trace: AttentionTrace) -> dict:
    """View shares from the CVF token attention; timescale shares from CTF path norms.

    View shares are the mean column masses of the 2x2 view attention and sum to 2.
    Timescale shares attribute each recent query row between the residual path
    (recent) and the cross-attention output (weekly) in proportion to their
    vector norms, averaged and scaled so the pair also sums to 2.
    """
    cvf_sites = trace.sites("cvf")
    if not cvf_sites or ("ctf",) not in trace.extras:
        raise IntrospectionError("trace lacks CVF or CTF records")
    masses = []
    for s in cvf_sites:
        rec = trace[s]
        col = _received(rec.weights, rec.axes)
        masses.append(col.reshape(-1, 2).mean(axis=0))
    view_mass = np.mean(masses, axis=0)
    order = trace.meta.get("view_order", ("dist", "demd"))
    view = {order[0]: float(view_mass[0]), order[1]: float(view_mass[1])}

    norms = trace.extras[("ctf",)]
    total = norms.sum(axis=-1)
    frac = np.where(total[..., None] > 0, norms / np.where(total > 0, total, 1.0)[..., None], 0.5)
    shares = 2.0 * frac.reshape(-1, 2).mean(axis=0)
    return {
        "view": (view["dist"], view["demd"]),
        "timescale": (float(shares[0]), float(shares[1])),
    }


def fusion_shares_from_weights(cvf_weights: np.ndarray) -> tuple[float, float]:
    """Column masses of (..., 2, 2) view attention, averaged over leading axes."""
    w = np.asarray(cvf_weights, dtype=float)
    col = w.sum(axis=-2).reshape(-1, 2).mean(axis=0)
    return float(col[0]), float(col[1])


def correlation(x, y) -> float | None:
    """Pearson r; None when either vector has zero variance."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("correlation needs two equal-length vectors of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc @ xc) * (yc @ yc))
    if denom == 0.0:
        return None
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


# ---------------------------------------------------------------------------
# report assembly and export


def build_report(trace: AttentionTrace, X_rec, X_wek, H_dist, H_rec, H_wek, demand, coords) -> dict:
    """All analyses for one traced forward pass, as plain python values."""
    rows: list[dict] = []
    summary: dict = {"hyperedges": {}, "temporal": {}, "fusion": {}}
    incid = {"dist": {"rec": H_dist, "wek": H_dist}, "demd": {"rec": H_rec.mean(axis=0), "wek": H_wek.mean(axis=0)}}
    for u in ("rec", "wek"):
        for v in ("dist", "demd"):
            H = incid[v][u]
            received = np.mean(
                [hyperedge_received_attention(trace, s) for s in trace.sites("gat") if s[2:] == (u, v)], axis=0
            )
            variance = hyperedge_demand_variance(demand, H)
            compact = hyperedge_compactness(coords, H)
            stream = f"{u}.{v}"
            for k in range(H.shape[1]):
                for stat, val in (("received_attention", received[k]), ("mean_variance", variance[k]),
                                  ("compactness", compact[k])):
                    rows.append({"entity": f"{stream}.hyperedge{k}", "statistic": stat, "value": _num(val)})
            ok = ~np.isnan(variance)
            summary["hyperedges"][stream] = {
                "received_attention": received.tolist(),
                "mean_variance": [_num(v_) for v_ in variance],
                "compactness": compact.tolist(),
                "corr_attention_variance": correlation(received[ok], variance[ok]) if ok.sum() >= 2 else None,
                "corr_attention_compactness": correlation(received, compact) if len(received) >= 2 else None,
            }
    split = temporal_attention_split(trace, {"rec": np.asarray(X_rec)[..., 0], "wek": np.asarray(X_wek)[..., 0]})
    for u, s in split.items():
        summary["temporal"][u] = {"ood_mean": s.ood_mean, "wd_mean": s.wd_mean, "n_ood": s.n_ood, "n_wd": s.n_wd}
        rows.append({"entity": f"{u}.ood_steps", "statistic": "mean_received_attention", "value": _num(s.ood_mean)})
        rows.append({"entity": f"{u}.wd_steps", "statistic": "mean_received_attention", "value": _num(s.wd_mean)})
    shares = fusion_attention_shares(trace)
    summary["fusion"] = {
        "view": {"dist": shares["view"][0], "demd": shares["view"][1]},
        "timescale": {"rec": shares["timescale"][0], "wek": shares["timescale"][1]},
    }
    for name, val in summary["fusion"]["view"].items():
        rows.append({"entity": f"view.{name}", "statistic": "attention_share", "value": val})
    for name, val in summary["fusion"]["timescale"].items():
        rows.append({"entity": f"timescale.{name}", "statistic": "attention_share", "value": val})
    return {"rows": rows, "summary": summary, "trace": trace}


def _num(v):
    if v is None:
        return None
    v = float(v)
    return None if np.isnan(v) else v


def write_report(report: dict, outdir) -> list[Path]:
    """tidy CSV + JSON summary + long-format attention file for plotting."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    tidy = outdir / "introspection.csv"
    with open(tidy, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "statistic", "value"])
        for r in report["rows"]:
            w.writerow([r["entity"], r["statistic"], "undefined" if r["value"] is None else repr(r["value"])])
    summary = outdir / "introspection.json"
    summary.write_text(json.dumps(report["summary"], indent=2, sort_keys=True) + "\n")
    long = outdir / "attention_long.csv"
    trace: AttentionTrace = report["trace"]
    with open(long, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "key_index", "mean_received_attention"])
        for site, rec in trace.items():
            col = _received(rec.weights, rec.axes)
            per_key = col.reshape(-1, col.shape[-1]).mean(axis=0)
            for j, val in enumerate(per_key):
                w.writerow([site_label(site), j, repr(float(val))])
    return [tidy, summary, long]
