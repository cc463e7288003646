from fractions import Fraction

import pytest

from gridflow.discrete_flow import PathFamily, build_solution, cost, lower_bound, usage
from gridflow.grid import INF, GridGraph, Permutation
from gridflow.oracle import (BudgetExceeded, ConvexInnerProblem, count_paths_brute,
                             enumerate_all_shortest, exact_cost_float, optimize_thickness)
from gridflow.solvers import canonical_family, solve, solve_1d


def test_count_paths_brute_examples():
    sol = solve_1d(Permutation(GridGraph(1, 4), [3, 2, 1, 0]))
    assert count_paths_brute(sol.family, ((1,), (2,))) == 4
    ident = solve(Permutation.identity(GridGraph(2, 3)))
    assert all(count_paths_brute(ident.family, ident.family.graph.edge_endpoints(e)) == 0
               for e in ident.family.graph.edge_ids())


def test_count_paths_brute_matches_usage():
    sol = solve(Permutation.random(GridGraph(3, 4), 3))
    g = sol.family.graph
    for e in g.edge_ids():
        assert count_paths_brute(sol.family, g.edge_endpoints(e)) == usage(sol, e)
        assert (count_paths_brute(sol.family, g.edge_endpoints(e)) * 4).denominator in (1, 2, 3)


def test_enumerate_all_shortest():
    assert enumerate_all_shortest((1, 1), (1, 1), listing=True) == (1, [[(1, 1)]])
    assert enumerate_all_shortest((0, 0), (2, 1))[0] == 3
    n, paths = enumerate_all_shortest((0, 0, 0), (1, 1, 1), listing=True)
    assert n == 6 and len({tuple(p) for p in paths}) == 6
    assert enumerate_all_shortest((0, 0, 0), (10, 10, 10))[0] == 5550996791340
    with pytest.raises(BudgetExceeded):
        enumerate_all_shortest((0, 0, 0), (7, 7, 5), listing=True)


@pytest.mark.parametrize("w", [(3, 2, 1), (2, 2, 0), (1, 3, 2), (0, 0, 3)])
def test_canonical_paths_are_shortest(w):
    _, every = enumerate_all_shortest((0, 0, 0), w, listing=True)
    every = {tuple(p) for p in every}
    for p in canonical_family((0, 0, 0), w):
        assert tuple(p) in every


def test_optimize_single_path_reaches_reciprocal_length():
    g = GridGraph(1, 5)
    sigma = Permutation(g, [4, 1, 2, 3, 0])
    fam = PathFamily(g, sigma, [(0, 1, 2, 3, 4)], [0], [Fraction(1)], check=False)
    res = optimize_thickness(ConvexInnerProblem(fam, 2))
    assert res.admissible
    for x in res.thickness.r[0]:
        assert abs(res.thickness.Q / x - 0.25) < 1e-8
    # l * (1/l)^(1-p) = l^p
    assert res.cost == pytest.approx(4.0, rel=1e-8)


def test_optimize_identity():
    fam = solve(Permutation.identity(GridGraph(2, 3))).family
    res = optimize_thickness(ConvexInnerProblem(fam, 2))
    assert res.cost == 0


@pytest.mark.parametrize("p", [1, 2, 3, INF])
def test_sandwich_reversal(p):
    s = Permutation(GridGraph(1, 4), [3, 2, 1, 0])
    sol = solve_1d(s)
    res = optimize_thickness(ConvexInnerProblem(sol.family, p))
    assert res.admissible
    assert float(lower_bound(s, p)) <= res.cost + 1e-12
    assert res.cost <= exact_cost_float(sol, p) + 1e-12
    assert all(b <= a + 1e-12 for a, b in zip(res.trace, res.trace[1:]))
