"""One-to-one assignment of predictions to ground-truth objects.

Cost matrices are laid out [n_pred, n_gt]; every ground truth receives a
distinct prediction.  Among equal-cost optima the lexicographically smallest
sequence of prediction indices (taken in ground-truth order) wins, in both
the Hungarian solver and the exhaustive oracle.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from golo.errors import ContractError, ShapeError

BRUTE_FORCE_LIMIT = 8


@dataclass
class Assignment:
    pairs: list = field(default_factory=list)  # (pred_index, gt_index), sorted by gt
    total_cost: float = 0.0

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def _validate(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-d, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ContractError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix contains non-finite entries")
    if cost.shape[0] < cost.shape[1]:
        raise ContractError(f"need n_pred >= n_gt, got {cost.shape}")
    return cost


def _tolerance(cost: np.ndarray) -> float:
    scale = float(np.abs(cost).max()) if cost.size else 0.0
    return 1e-9 * max(1.0, scale) * max(1, cost.shape[1])


def _solve(rows: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method on a [n, m] matrix, n <= m.

    Returns the column assigned to each row.  Candidate columns are scanned in
    ascending order with strict comparisons, so ties fall to lower indices.
    """
    n, m = rows.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # row (1-based) owning each column; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            reduced = rows[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if match[j]:
            cols[match[j] - 1] = j - 1
    return cols


def _optimal_total(cost: np.ndarray) -> float:
    if cost.shape[1] == 0:
        return 0.0
    preds = _solve(cost.T)
    return float(cost[preds, np.arange(cost.shape[1])].sum())


def _lexicographic(cost: np.ndarray, best: float, tol: float) -> np.ndarray:
    """Smallest pred sequence (in gt order) whose total is within ``tol`` of ``best``."""
    n_pred, n_gt = cost.shape
    available = list(range(n_pred))
    chosen = []
    running = 0.0
    for g in range(n_gt):
        for p in available:
            rest = [q for q in available if q != p]
            remainder = _optimal_total(cost[np.ix_(rest, range(g + 1, n_gt))])
            if running + cost[p, g] + remainder <= best + tol:
                chosen.append(p)
                running += cost[p, g]
                available = rest
                break
        else:  # pragma: no cover - best is attainable by construction
            raise RuntimeError("lexicographic refinement lost the optimum")
    return np.array(chosen, dtype=np.int64)


def _may_tie(cost: np.ndarray, tol: float) -> bool:
    # equal optima need repeated entries or commensurate (integral) entries;
    # generic real-valued costs have a unique optimum almost surely
    vals = np.sort(cost, axis=None)
    return bool(np.any(np.diff(vals) <= tol) or np.all(cost == np.round(cost)))


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment covering every ground truth."""
    cost = _validate(cost)
    n_pred, n_gt = cost.shape
    if n_gt == 0:
        return Assignment([], 0.0)
    preds = _solve(cost.T)
    total = float(cost[preds, np.arange(n_gt)].sum())
    tol = _tolerance(cost)
    if _may_tie(cost, tol):
        preds = _lexicographic(cost, total, tol)
        total = float(cost[preds, np.arange(n_gt)].sum())
    return Assignment([(int(p), g) for g, p in enumerate(preds)], total)


@lru_cache(maxsize=None)
def _injections(n_pred: int, n_gt: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n_pred), n_gt)), dtype=np.int64).reshape(-1, n_gt)


def brute_force_match(cost) -> Assignment:
    """Exhaustive search over every injection gt -> pred (n_gt <= 8)."""
    cost = _validate(cost)
    n_pred, n_gt = cost.shape
    if n_gt > BRUTE_FORCE_LIMIT:
        raise ContractError(f"brute force supports at most {BRUTE_FORCE_LIMIT} ground truths, got {n_gt}")
    if math.perm(n_pred, n_gt) > 5_000_000:
        raise ContractError(f"too many injections to enumerate for shape {cost.shape}")
    if n_gt == 0:
        return Assignment([], 0.0)
    perms = _injections(n_pred, n_gt)  # lexicographic order
    totals = cost[perms, np.arange(n_gt)].sum(axis=1)
    first = int(np.nonzero(totals <= totals.min() + _tolerance(cost))[0][0])
    preds = perms[first]
    return Assignment([(int(p), g) for g, p in enumerate(preds)], float(cost[preds, np.arange(n_gt)].sum()))
