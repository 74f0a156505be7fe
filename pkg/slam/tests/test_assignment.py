"""
Assignment: optimal 2D assignment with forbidden pairs, deterministic ties,
and Murty's k-best checked against exhaustive enumeration.
"""
import itertools

import numpy as np
import pytest

from slam.assignment import murty_kbest, solve_assignment
from slam.errors import Infeasible


def brute_force(cost, k):
    """All feasible assignments sorted by (cost, columns), first k."""
    n_rows, n_cols = cost.shape
    found = []
    for cols in itertools.permutations(range(n_cols), n_rows):
        total = sum(cost[i, j] for i, j in enumerate(cols))
        if np.isfinite(total):
            found.append((float(total), cols))
    found.sort()
    return found[:k]


def test_solve_assignment_square():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    assignment, total = solve_assignment(cost)
    assert assignment == (1, 0, 2)
    assert total == pytest.approx(5.0)


def test_solve_assignment_rectangular_with_forbidden_pairs():
    inf = np.inf
    cost = np.array([[inf, 2.0, 7.0, inf], [1.0, inf, 3.0, inf]])
    assignment, total = solve_assignment(cost)
    assert assignment == (1, 0)
    assert total == pytest.approx(3.0)


def test_solve_assignment_empty():
    assert solve_assignment(np.zeros((0, 4))) == ((), 0.0)


def test_solve_assignment_infeasible():
    inf = np.inf
    with pytest.raises(Infeasible):
        solve_assignment(np.array([[inf, inf], [1.0, 2.0]]))
    with pytest.raises(Infeasible):
        solve_assignment(np.array([[1.0, inf], [2.0, inf]]))
    with pytest.raises(Infeasible):
        solve_assignment(np.ones((3, 2)))


def test_ties_resolve_to_smallest_column_vector():
    assignment, total = solve_assignment(np.zeros((2, 3)))
    assert assignment == (0, 1)
    assert total == 0.0

    assignment, _ = solve_assignment(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert assignment == (0, 1)


def test_murty_two_by_two():
    result = murty_kbest(np.array([[1.0, 10.0], [10.0, 1.0]]), 2)
    assert [c for _, c in result] == [pytest.approx(2.0), pytest.approx(20.0)]
    assert [a for a, _ in result] == [(0, 1), (1, 0)]


def test_murty_k1_equals_optimal():
    cost = np.array([[3.0, 1.0, 4.0], [1.0, 5.0, 9.0]])
    (assignment, total), = murty_kbest(cost, 1)
    assert (assignment, total) == solve_assignment(cost)


def test_murty_returns_fewer_when_exhausted():
    result = murty_kbest(np.array([[1.0, 2.0]]), 5)
    assert len(result) == 2
    assert [a for a, _ in result] == [(0,), (1,)]


def test_murty_zero_rows():
    assert murty_kbest(np.zeros((0, 3)), 4) == [((), 0.0)]


def test_murty_rejects_bad_k():
    with pytest.raises(ValueError):
        murty_kbest(np.ones((1, 1)), 0)


def test_murty_matches_exhaustive_enumeration():
    """200 random matrices up to 5x7 with forbidden entries, k = 10."""
    rng = np.random.Generator(np.random.Philox(2024))
    for _ in range(200):
        n_rows = int(rng.integers(1, 6))
        n_cols = int(rng.integers(n_rows, 8))
        cost = rng.uniform(-5.0, 10.0, size=(n_rows, n_cols))
        cost[rng.random((n_rows, n_cols)) < 0.15] = np.inf

        expected = brute_force(cost, 10)
        if not expected:
            with pytest.raises(Infeasible):
                murty_kbest(cost, 10)
            continue

        got = murty_kbest(cost, 10)
        assert len(got) == len(expected)
        np.testing.assert_allclose([c for _, c in got], [c for c, _ in expected], atol=1e-9)
        assert [a for a, _ in got] == [a for _, a in expected]
        assert all(got[i][1] <= got[i + 1][1] + 1e-12 for i in range(len(got) - 1))
