"""Soft station-to-hyperedge incidence matrices from two views.

Distance view: fuzzy C-means on station (lon, lat).  Demand view: Pearson
similarity of a demand window, unnormalized Laplacian, and per-station
normalized absolute eigenvector loadings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0


class HypergraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IncidenceMatrix:
    values: np.ndarray  # (N_s, K), rows sum to 1
    view: str  # "distance" | "demand"
    timescale: str  # "recent" | "weekly" | "static"
    params: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.values.shape[1]


def _check_K(K: int, n: int) -> None:
    if not 1 <= K <= max(n - 1, 1):
        raise HypergraphError(f"K must lie in [1, N_s - 1] = [1, {n - 1}], got {K}")


def geodesic_distances(coords) -> np.ndarray:
    """Pairwise haversine distances (km) for (lon, lat) pairs in degrees."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    lon, lat = coords[:, 0], coords[:, 1]
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180) or not np.all(np.isfinite(coords)):
        raise HypergraphError("coordinates must satisfy |lat| <= 90 and |lon| <= 180")
    lon, lat = np.radians(lon), np.radians(lat)
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2) ** 2 + np.cos(lat[:, None]) * np.cos(lat[None, :]) * np.sin(dlon / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


# ---------------------------------------------------------------------------
# fuzzy C-means


def fcm_init_centroids(points: np.ndarray, K: int, seed: int) -> np.ndarray:
    """Seeded first pick, then repeatedly the point farthest from all chosen."""
    rng = np.random.default_rng(seed)
    points = np.asarray(points, dtype=float)
    chosen = [int(rng.integers(len(points)))]
    nearest = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen].copy()


def fcm_memberships(points: np.ndarray, centroids: np.ndarray, m: float) -> np.ndarray:
    """u_pk = 1 / sum_j (d_pk / d_pj)^(2/(m-1)); a zero distance takes the limit."""
    d = np.sqrt(((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2))
    U = np.empty_like(d)
    zero = d == 0.0
    hit = zero.any(axis=1)
    if hit.any():
        U[hit] = zero[hit] / zero[hit].sum(axis=1, keepdims=True)
    rest = ~hit
    if rest.any():
        inv = d[rest] ** (-2.0 / (m - 1.0))
        U[rest] = inv / inv.sum(axis=1, keepdims=True)
    return U


def fcm(points, K: int, m: float = 2.0, tol: float = 1e-6, max_iter: int = 300, seed: int = 0):
    """Fuzzy C-means. Returns ``(U, centroids, n_iter)``."""
    points = np.asarray(points, dtype=float)
    centroids = fcm_init_centroids(points, K, seed)
    U = fcm_memberships(points, centroids, m)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        w = U**m
        centroids = (w.T @ points) / w.sum(axis=0)[:, None]
        U_new = fcm_memberships(points, centroids, m)
        delta = np.abs(U_new - U).max()
        U = U_new
        if delta < tol:
            break
    return U, centroids, n_iter


def fcm_soft_clusters(
    coords, K: int, m: float = 2.0, tol: float = 1e-6, max_iter: int = 300, seed: int = 0
) -> IncidenceMatrix:
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    _check_K(K, len(coords))
    if K == 1:
        U = np.ones((len(coords), 1))
    else:
        U, _, _ = fcm(coords, K, m=m, tol=tol, max_iter=max_iter, seed=seed)
    return IncidenceMatrix(
        U, "distance", "static", {"method": "fcm", "m": m, "tol": tol, "max_iter": max_iter, "seed": seed}
    )


# ---------------------------------------------------------------------------
# demand view


def pearson_similarity(window) -> np.ndarray:
    """Row-wise Pearson correlation; a constant row correlates 0 with others."""
    x = np.asarray(window, dtype=float)
    if x.ndim != 2 or x.shape[1] < 2:
        raise HypergraphError(f"need an (N_s, T>=2) demand window, got shape {x.shape}")
    xc = x - x.mean(axis=1, keepdims=True)
    # rescale before squaring so tiny deviations do not underflow
    peak = np.abs(xc).max(axis=1)
    constant = (np.ptp(x, axis=1) == 0.0) | (peak == 0.0)
    peak[constant] = 1.0
    xc = xc / peak[:, None]
    norm = np.sqrt((xc * xc).sum(axis=1))
    norm[constant] = 1.0
    z = xc / norm[:, None]
    z[constant] = 0.0
    omega = np.clip(z @ z.T, -1.0, 1.0)
    omega = (omega + omega.T) / 2
    np.fill_diagonal(omega, 1.0)
    return omega


def graph_laplacian(sim) -> np.ndarray:
    """L = D - A with affinity A = (1 + sim) / 2."""
    sim = np.asarray(sim, dtype=float)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise HypergraphError(f"similarity must be square, got {sim.shape}")
    A = (1.0 + sim) / 2.0
    return np.diag(A.sum(axis=1)) - A


def laplacian_eigenpairs(L, K: int):
    """The K smallest eigenvalues (ascending) and their eigenvectors as columns."""
    try:
        vals, vecs = np.linalg.eigh(np.asarray(L, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise HypergraphError(f"eigensolver failed: {exc}") from None
    order = np.lexsort((np.arange(len(vals)), vals))[:K]
    return vals[order], vecs[:, order]


def soft_assign_from_eigvecs(eigvecs) -> np.ndarray:
    mag = np.abs(np.asarray(eigvecs, dtype=float))
    total = mag.sum(axis=1, keepdims=True)
    K = mag.shape[1]
    degenerate = (total <= 1e-12)[:, 0]
    H = np.empty_like(mag)
    H[~degenerate] = mag[~degenerate] / total[~degenerate]
    H[degenerate] = 1.0 / K
    return H


def spectral_soft_assign(L, K: int, timescale: str = "recent") -> IncidenceMatrix:
    L = np.asarray(L, dtype=float)
    _check_K(K, L.shape[0])
    _, vecs = laplacian_eigenpairs(L, K)
    return IncidenceMatrix(soft_assign_from_eigvecs(vecs), "demand", timescale, {"method": "spectral"})


def demand_hypergraph(window, K: int, timescale: str = "recent") -> IncidenceMatrix:
    """Pearson -> Laplacian -> spectral soft assignment.

    A single-step window carries no correlation information, so every station
    gets the uniform 1/K row (as for an all-zero eigenvector row).
    """
    window = np.asarray(window, dtype=float)
    if window.ndim == 2 and window.shape[1] == 1:
        _check_K(K, window.shape[0])
        return IncidenceMatrix(np.full((window.shape[0], K), 1.0 / K), "demand", timescale, {"method": "uniform"})
    return spectral_soft_assign(graph_laplacian(pearson_similarity(window)), K, timescale)


def build_batch_demand_hypergraphs(windows, K: int, timescale: str = "recent") -> list[IncidenceMatrix]:
    """One demand hypergraph per batch item from (B, N_s, T) demand slices."""
    windows = np.asarray(windows, dtype=float)
    if windows.ndim != 3:
        raise HypergraphError(f"expected (B, N_s, T) demand slices, got {windows.shape}")
    return [demand_hypergraph(w, K, timescale) for w in windows]


def stack_incidence(mats: Sequence[IncidenceMatrix]) -> np.ndarray:
    return np.stack([m.values for m in mats])
