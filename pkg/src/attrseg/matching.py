"""Minimum-cost bipartite matching between queries and targets.

The optimal assignment value comes from scipy's linear_sum_assignment; a
greedy fixing pass on top selects, among all optimal assignments, the
lexicographically smallest pair set, which makes matching deterministic
under ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Set, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment


class ContractError(ValueError):
    pass


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int]]  # (query index, target index), sorted
    unmatched_queries: List[int]

    def total_cost(self, cost: np.ndarray) -> float:
        return math.fsum(float(cost[q, t]) for q, t in self.pairs)


def _optimal_cost(cost: np.ndarray, banned_rows: Set[int],
                  fixed: List[Tuple[int, int]]) -> Optional[float]:
    """Best achievable total with `fixed` pairs forced and rows in
    `banned_rows` excluded; None when no completion of full size exists."""
    n, m = cost.shape
    size = min(n, m)
    fixed_rows = {q for q, _ in fixed}
    fixed_cols = {t for _, t in fixed}
    rows = [r for r in range(n) if r not in banned_rows and r not in fixed_rows]
    cols = [c for c in range(m) if c not in fixed_cols]
    need = size - len(fixed)
    if need > min(len(rows), len(cols)):
        return None
    base = math.fsum(float(cost[q, t]) for q, t in fixed)
    if need == 0:
        return base
    # scipy assigns min(len(rows), len(cols)) pairs, which equals `need`
    # whenever a completion is feasible
    sub = cost[np.ix_(rows, cols)]
    ri, ci = linear_sum_assignment(sub)
    return base + math.fsum(float(sub[i, j]) for i, j in zip(ri, ci))


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Partial injection of size min(n, m) minimizing the summed cost;
    lexicographically smallest pair set among optima."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("non-finite entries in cost matrix")
    n, m = cost.shape
    size = min(n, m)
    if size == 0:
        return MatchResult(pairs=[], unmatched_queries=list(range(n)))

    best = _optimal_cost(cost, set(), [])
    tol = 1e-9 * max(1.0, abs(best))
    fixed: List[Tuple[int, int]] = []
    banned: Set[int] = set()
    row = 0
    while len(fixed) < size:
        advanced = False
        for t in range(m):
            if t in {c for _, c in fixed}:
                continue
            cand = fixed + [(row, t)]
            val = _optimal_cost(cost, banned, cand)
            if val is not None and abs(val - best) <= tol:
                fixed = cand
                advanced = True
                break
        if not advanced:
            # row cannot be on any optimal assignment given choices so far
            banned.add(row)
        row += 1
        if row >= n and len(fixed) < size:  # defensive; should not happen
            raise RuntimeError("failed to reconstruct optimal assignment")

    matched_rows = {q for q, _ in fixed}
    return MatchResult(pairs=sorted(fixed),
                       unmatched_queries=[q for q in range(n) if q not in matched_rows])
