"""Optimal and k-best 2D assignment.

Rows (measurements, truth points) are always fully assigned; columns may stay
unassigned. Infeasible pairs are +inf in the cost matrix. Internally they are
replaced with a sentinel larger than any feasible total before calling the
Hungarian solver, and a solution touching a sentinel means "infeasible".

Ties are broken deterministically: among equal-cost assignments the one with
the lexicographically smallest column vector wins.
"""
from __future__ import annotations

import heapq
import itertools
import logging

import numpy as np
from scipy.optimize import linear_sum_assignment

from slam.errors import Infeasible

logger = logging.getLogger(__name__)

Assignment = tuple[int, ...]

TIE_RTOL = 1e-9


def _as_cost(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if np.any(np.isnan(cost)) or np.any(cost == -np.inf):
        raise ValueError("cost matrix entries must be finite or +inf")
    return cost


def _sentinel(cost: np.ndarray) -> float:
    finite = cost[np.isfinite(cost)]
    return 2.0 * float(np.abs(finite).sum()) + 1.0


def _solve_raw(cost: np.ndarray) -> tuple[Assignment, float]:
    n_rows, n_cols = cost.shape
    if n_rows == 0:
        return (), 0.0
    if n_rows > n_cols:
        raise Infeasible(f"{n_rows} rows cannot be assigned to {n_cols} columns")
    finite = np.isfinite(cost)
    if not finite.any(axis=1).all():
        raise Infeasible("a row has no finite entry")
    work = np.where(finite, cost, _sentinel(cost))
    rows, cols = linear_sum_assignment(work)
    if not finite[rows, cols].all():
        raise Infeasible("no assignment with finite cost")
    return tuple(int(c) for c in cols), float(cost[rows, cols].sum())


def _constrained(cost: np.ndarray, includes, excludes) -> np.ndarray:
    M = cost.copy()
    for i, j in excludes:
        M[i, j] = np.inf
    for i, j in includes:
        keep = M[i, j]
        M[i, :] = np.inf
        M[:, j] = np.inf
        M[i, j] = keep
    return M


def _lexicographic_optimum(cost: np.ndarray, assignment: Assignment, total: float) -> Assignment:
    """Smallest column vector among assignments within TIE_RTOL of the optimum."""
    tol = TIE_RTOL * max(1.0, abs(total))
    includes: list[tuple[int, int]] = []
    current = list(assignment)
    for i in range(len(current)):
        for j in range(current[i]):
            if not np.isfinite(cost[i, j]):
                continue
            try:
                candidate, candidate_total = _solve_raw(_constrained(cost, includes + [(i, j)], ()))
            except Infeasible:
                continue
            if candidate_total <= total + tol:
                current = list(candidate)
                break
        includes.append((i, current[i]))
    return tuple(current)


def solve_assignment(cost) -> tuple[Assignment, float]:
    """Minimum-cost assignment of every row to a distinct column.

    Args:
        cost: (n_rows, n_cols) matrix, +inf for forbidden pairs, n_rows <= n_cols.

    Returns:
        Tuple of (assignment, total) where assignment[i] is the column of row i.

    Raises:
        Infeasible: no assignment with finite total exists.
    """
    cost = _as_cost(cost)
    assignment, total = _solve_raw(cost)
    assignment = _lexicographic_optimum(cost, assignment, total)
    rows = np.arange(len(assignment))
    total = float(cost[rows, list(assignment)].sum()) if assignment else 0.0
    return assignment, total


def murty_kbest(cost, k: int) -> list[tuple[Assignment, float]]:
    """The k lowest-cost assignments (Murty's partitioning), nondecreasing in cost.

    Returns fewer than k entries when fewer feasible assignments exist.

    Raises:
        Infeasible: not even one feasible assignment.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    cost = _as_cost(cost)
    n_rows = cost.shape[0]
    first, first_total = solve_assignment(cost)

    counter = itertools.count()
    # (total, assignment, tiebreak, includes, excludes)
    heap = [(first_total, first, next(counter), (), frozenset())]
    results: list[tuple[Assignment, float]] = []
    seen: set[Assignment] = set()

    while heap and len(results) < k:
        total, assignment, _, includes, excludes = heapq.heappop(heap)
        if assignment in seen:
            continue
        seen.add(assignment)
        results.append((assignment, total))

        fixed_rows = {i for i, _ in includes}
        child_includes = list(includes)
        for i in range(n_rows):
            if i in fixed_rows:
                continue
            child_excludes = excludes | {(i, assignment[i])}
            try:
                child, _ = _solve_raw(_constrained(cost, child_includes, child_excludes))
            except Infeasible:
                pass
            else:
                child_total = float(cost[np.arange(n_rows), list(child)].sum())
                heapq.heappush(heap, (child_total, child, next(counter), tuple(child_includes), child_excludes))
            child_includes.append((i, assignment[i]))

    logger.debug(f"murty_kbest: {len(results)} of {k} assignments for a {cost.shape} matrix")
    return results
