"""Optimal rectangular assignment (Hungarian / shortest augmenting path).

``solve_assignment`` assigns every row of an ``n x m`` cost matrix
(``n <= m``) to a distinct column so that the total cost is minimal.
The potentials-based augmenting-path formulation runs in O(n^2 m).

The same loop source serves both backends: the numba backend compiles it,
the numpy backend runs it as-is (matrices here are tiny). Optimality is
checked against a brute-force permutation oracle in the tests.
"""

from __future__ import annotations

import numpy as np

INF = np.inf


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    n, m = cost.shape
    # 1-indexed potentials; col_row[j] = row currently matched to column j
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    col_row = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        col_row[0] = i
        j0 = 0
        min_to = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < min_to[j]:
                        min_to[j] = cur
                        way[j] = j0
                    if min_to[j] < delta:
                        delta = min_to[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[col_row[j]] += delta
                    v[j] -= delta
                else:
                    min_to[j] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        # unwind the augmenting path
        while j0 != 0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    row_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if col_row[j] != 0:
            row_col[col_row[j] - 1] = j - 1
    return row_col


def compile_solver():
    """Return the numba-compiled variant of ``solve_assignment``."""
    from numba import njit

    return njit(cache=True)(solve_assignment)
