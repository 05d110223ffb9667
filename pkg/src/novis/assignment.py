"""Exact linear assignment (Kuhn–Munkres with row/column potentials)."""
from __future__ import annotations

import numpy as np

from .tensor import ContractViolation


def linear_assignment(cost) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment for a rectangular cost matrix.

    Returns ``(rows, cols)`` index arrays of length ``min(n, m)``, sorted by
    row. Runs the shortest-augmenting-path form of the Hungarian method in
    O(n^2 m) for the transposed-if-needed ``n <= m`` orientation.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ContractViolation(f"cost matrix must be 2-d, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ContractViolation("cost matrix has non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    if n > m:
        cols, rows = linear_assignment(c.T)
        order = np.argsort(rows, kind="stable")
        return rows[order], cols[order]

    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) assigned to column j; 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows, cols = [], []
    for j in range(1, m + 1):
        if p[j]:
            rows.append(p[j] - 1)
            cols.append(j - 1)
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]


def assignment_cost(cost, rows, cols) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(c[rows, cols].sum())
