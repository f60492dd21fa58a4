"""Earth Mover's and Chamfer distances between equal-size point sets."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import SizeError


@dataclass
class TransportResult:
    cost: float
    matching: np.ndarray  # matching[i] = index in B paired with A[i]


def _as_points(x):
    pts = getattr(x, "points", x)
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def cost_matrix(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect assignment of a square cost matrix.

    Shortest augmenting path with dual potentials, O(n^3); returns the column
    assigned to each row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    # 1-based columns; column 0 is the virtual source of each augmentation
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    match = np.empty(n, dtype=np.int64)
    match[p[1:] - 1] = np.arange(n)
    return match


def emd_exact(A, B, solver="scipy") -> TransportResult:
    """Minimum over bijections of the summed Euclidean point distances.

    ``solver="scipy"`` uses scipy's LAPJV-style solver, ``"hungarian"`` the
    in-package one; both are exact.
    """
    A, B = _as_points(A), _as_points(B)
    if len(A) != len(B):
        raise SizeError(f"EMD needs equal sizes, got {len(A)} and {len(B)}")
    if len(A) == 0:
        raise SizeError("EMD of empty clouds")
    C = cost_matrix(A, B)
    if solver == "scipy":
        rows, cols = linear_sum_assignment(C)
        match = np.empty(len(A), dtype=np.int64)
        match[rows] = cols
    elif solver == "hungarian":
        match = hungarian(C)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return TransportResult(float(C[np.arange(len(A)), match].sum()), match)


def emd_bruteforce(A, B) -> TransportResult:
    """Exhaustive search over all n! bijections (n <= 8); test oracle."""
    A, B = _as_points(A), _as_points(B)
    n = len(A)
    if n != len(B):
        raise SizeError(f"EMD needs equal sizes, got {len(A)} and {len(B)}")
    if n > 8:
        raise SizeError(f"brute force refuses n={n} > 8")
    C = cost_matrix(A, B)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)
    costs = C[np.arange(n), perms].sum(axis=1)
    best = int(np.argmin(costs))
    return TransportResult(float(costs[best]), perms[best].copy())


def matching_cost(A, B, matching) -> float:
    A, B = _as_points(A), _as_points(B)
    return float(np.linalg.norm(A - B[matching], axis=1).sum())


def emd_subgradient(A, B, matching) -> np.ndarray:
    """d/dA of sum ||a - B[matching[a]]|| at a fixed matching; zero at coincident pairs."""
    A, B = _as_points(A), _as_points(B)
    diff = A - B[np.asarray(matching)]
    norm = np.linalg.norm(diff, axis=1, keepdims=True)
    return np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)


def chamfer(A, B) -> float:
    """Mean squared nearest-neighbour distance A->B plus B->A."""
    A, B = _as_points(A), _as_points(B)
    if len(A) == 0 or len(B) == 0:
        raise SizeError("Chamfer distance of an empty cloud")
    d2 = cost_matrix(A, B) ** 2
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def emd_per_point(A, B) -> float:
    return emd_exact(A, B).cost / len(_as_points(A))
