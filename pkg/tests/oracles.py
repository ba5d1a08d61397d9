"""Independent reference implementations used only by the tests."""

import math

import numpy as np


def jacobi_eigh(A, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations for a small symmetric matrix.

    Returns eigenvalues ascending and eigenvectors as columns.
    """
    A = np.array(A, dtype=float)
    n = len(A)
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i][j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p][q]) < 1e-300:
                    continue
                theta = (A[q][q] - A[p][p]) / (2.0 * A[p][q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p][p] = J[q][q] = c
                J[p][q] = s
                J[q][p] = -s
                A = J.T @ A @ J
                V = V @ J
    vals = np.diag(A).copy()
    order = np.argsort(vals, kind="stable")
    return vals[order], V[:, order]


def loop_fcm(points, init_centroids, m=2.0, tol=1e-6, max_iter=300):
    """Textbook fuzzy C-means written with plain python loops."""
    pts = [list(map(float, p)) for p in points]
    cents = [list(map(float, c)) for c in init_centroids]
    n, K, dim = len(pts), len(cents), len(pts[0])

    def memberships(cents):
        U = []
        for x in pts:
            d = [math.sqrt(sum((x[i] - c[i]) ** 2 for i in range(dim))) for c in cents]
            if min(d) == 0.0:
                zeros = [1.0 if v == 0.0 else 0.0 for v in d]
                U.append([z / sum(zeros) for z in zeros])
                continue
            row = []
            for k in range(K):
                row.append(1.0 / sum((d[k] / d[j]) ** (2.0 / (m - 1.0)) for j in range(K)))
            U.append(row)
        return U

    U = memberships(cents)
    for _ in range(max_iter):
        for k in range(K):
            w = [U[p][k] ** m for p in range(n)]
            cents[k] = [sum(w[p] * pts[p][i] for p in range(n)) / sum(w) for i in range(dim)]
        U_new = memberships(cents)
        delta = max(abs(U_new[p][k] - U[p][k]) for p in range(n) for k in range(K))
        U = U_new
        if delta < tol:
            break
    return np.array(U), np.array(cents)


def haversine_km(lon1, lat1, lon2, lat2, radius=6371.0):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius * math.asin(math.sqrt(h))


def principal_angles(A, B):
    """Principal angles (radians) between the column spaces of A and B."""
    qa, _ = np.linalg.qr(A)
    qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))
