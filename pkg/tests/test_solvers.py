from fractions import Fraction

import pytest

from gridflow.discrete_flow import cost, is_admissible, usage
from gridflow.grid import INF, GridGraph, Permutation, displacement_norm, displacement_power_sum
from gridflow.oracle import count_paths_brute
from gridflow.solvers import (canonical_family, certified_sup_lower_bound, counterexample_census,
                              counterexample_permutation, counterexample_usage, predict_usage_1d,
                              predict_usage_2d, single_path_family, solve, solve_1d, solve_2d,
                              solve_multi, solve_single_path, visit_fraction_bound)


def test_solve_1d_reversal_and_swap():
    sol = solve_1d(Permutation(GridGraph(1, 4), [3, 2, 1, 0]))
    assert is_admissible(sol)
    assert cost(sol, INF) == 4 <= 3 * 3
    sw = solve_1d(Permutation(GridGraph(1, 2), [1, 0]))
    assert cost(sw, 1) == 2 == displacement_norm(sw.family.sigma, 1)
    assert cost(solve_1d(Permutation.identity(GridGraph(1, 6))), 2) == 0


def test_predict_usage_1d_examples():
    s = Permutation(GridGraph(1, 4), [3, 2, 1, 0])
    assert predict_usage_1d(s, 1) == 4
    assert predict_usage_1d(s, 0) == 2
    assert predict_usage_1d(Permutation.identity(GridGraph(1, 4)), 2) == 0


def test_solve_2d_transposition():
    g = GridGraph(2, 2)
    s = Permutation.from_function(g, lambda v: {(0, 1): (1, 0), (1, 0): (0, 1)}.get(v, v))
    sol = solve_2d(s)
    assert is_admissible(sol)
    for gi, p in enumerate(sol.family.paths):
        verts = [g.vertex(i) for i in p]
        if len(verts) > 1:
            v, w = verts[0], verts[-1]
            assert len(verts) == 3 and verts[1] == (w[0], v[1])
    for e in [((0, 0), (1, 0)), ((1, 0), (1, 1))]:
        assert predict_usage_2d(s, e) == count_paths_brute(sol.family, e)


@pytest.mark.parametrize("seed", range(3))
def test_predict_usage_2d_random(seed):
    s = Permutation.random(GridGraph(2, 8), seed)
    sol = solve_2d(s)
    g = s.graph
    for eid in g.edge_ids():
        e = g.edge_endpoints(eid)
        assert predict_usage_2d(s, e) == usage(sol, eid)


def test_canonical_family_counts():
    assert canonical_family((1, 1, 1), (1, 1, 1)) == [[(1, 1, 1)]]
    fam = canonical_family((0, 0, 0), (3, 2, 1))
    assert len(fam) == 4
    fam2 = canonical_family((0, 0, 0), (2, 2, 0))
    assert len(fam2) == 3 and all(len(p) - 1 == 4 for p in fam2)


def test_solve_multi_small():
    g = GridGraph(3, 2)
    s = Permutation.from_function(g, lambda v: {(0, 0, 0): (1, 0, 0), (1, 0, 0): (0, 0, 0)}.get(v, v))
    sol = solve_multi(s)
    assert cost(sol, 1) == 2 == displacement_norm(s, 1)
    assert cost(solve_multi(Permutation.identity(g)), 2) == 0


def test_solve_multi_seeded_constant():
    s = Permutation.random(GridGraph(3, 4), 11)
    sol = solve_multi(s)
    assert is_admissible(sol)
    for p in (1, 3):
        assert cost(sol, p) ** p <= 25 ** p * displacement_power_sum(s, p)
    assert cost(sol, INF) <= 25 * displacement_norm(s, INF)


def test_counterexample_permutation():
    assert counterexample_permutation(2)((0, 0, 0)) == (0, 1, 0)
    s = counterexample_permutation(8)
    assert s((1, 3, 5)) == (5, 4, 1)
    assert s.compose(s).compose(s).compose(s).is_identity()


def test_single_path_family():
    assert single_path_family((2, 1), (2, 1)) == [(2, 1)]
    p = single_path_family((0, 0, 0), (1, 1, 1))
    assert p[1:3] == [(1, 0, 0), (1, 1, 0)]
    assert len(p) - 1 == 3


def test_counterexample_usage_closed_form():
    n = 8
    sol = solve(counterexample_permutation(n), single_path=True)
    # brute count on the middle edge is 64 (not 2N*min(j, N-1-j) = 48)
    assert count_paths_brute(sol.family, ((2, 3, 2), (2, 4, 2))) == 64
    assert counterexample_usage(n, ((2, 3, 2), (2, 4, 2))) == 64
    assert counterexample_usage(n, ((0, 0, 0), (0, 1, 0))) == 16
    with pytest.raises(ValueError):
        counterexample_usage(n, ((0, 0, 0), (1, 0, 0)))
    for i in range(n):
        for j in range(n - 1):
            e = ((i, j, i), (i, j + 1, i))
            assert count_paths_brute(sol.family, e) == counterexample_usage(n, e)


def test_counterexample_census_values():
    # F >= N^2 on exactly N edges; threshold N^2/2 gives N^2/2 + N
    for n in (4, 8):
        sol = solve(counterexample_permutation(n), single_path=True)
        assert counterexample_census(sol, n * n) == n
        assert counterexample_census(sol, Fraction(n * n, 2)) == n * n // 2 + n
        assert certified_sup_lower_bound(sol) == n * n


def test_visit_fraction_cases():
    vf = visit_fraction_bound((0, 0, 0), (3, 2, 1), (1, 0, 0))
    assert vf.case == "b" and vf.bound == 1 and vf.measured == Fraction(3, 4)
    assert visit_fraction_bound((0, 0, 0), (3, 2, 1), (0, 0, 0)).measured == 1
    vf = visit_fraction_bound((0, 0, 0), (3, 3, 3), (1, 1, 1))
    assert vf.case == "a" and vf.measured == 0
