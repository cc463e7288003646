from fractions import Fraction

import pytest

from gridflow.discrete_flow import (FlowSolution, PathFamily, Thickness, build_solution,
                                    check_capacity_constraint, check_time_constraint, cost,
                                    is_admissible, lower_bound, standard_thickness, usage)
from gridflow.grid import INF, GridGraph, Permutation
from gridflow.oracle import count_paths_brute
from gridflow.solvers import canonical_family, counterexample_permutation, solve_1d


def reversal4():
    return Permutation(GridGraph(1, 4), [3, 2, 1, 0])


def test_identity_everything_zero():
    sol = solve_1d(Permutation.identity(GridGraph(1, 5)))
    for eid in sol.family.graph.edge_ids():
        assert usage(sol, eid) == 0
    assert check_time_constraint(sol).max_lhs == 0 and check_time_constraint(sol).passed
    assert check_capacity_constraint(sol).max_lhs == 0
    for p in (1, 2, INF):
        assert cost(sol, p) == 0
        assert lower_bound(sol.family.sigma, p) == 0


def test_reversal_usage_and_constraints():
    sol = solve_1d(reversal4())
    g = sol.family.graph
    assert usage(sol, g.edge_of((1,), (2,))) == 4
    assert usage(sol, g.edge_of((0,), (1,))) == 2
    tc = check_time_constraint(sol)
    assert tc.passed and tc.max_lhs == Fraction(11, 12)
    cc = check_capacity_constraint(sol)
    assert cc.passed and cc.max_lhs == 1
    assert cost(sol, INF) == 4
    assert lower_bound(sol.family.sigma, INF) == 3


def test_standard_thickness_values():
    sol = solve_1d(reversal4())
    g = sol.family.graph
    fam = sol.family
    g0 = fam.by_owner[0][0]
    g1 = fam.by_owner[1][0]
    assert sol.thickness.lookup(g.edge_of((0,), (1,)), g0) == Fraction(1, 3)
    assert sol.thickness.lookup(g.edge_of((1,), (2,)), g1) == Fraction(1, 4)


def test_single_path_alone_gets_inverse_length():
    g = GridGraph(1, 5)
    sigma = Permutation(g, [3, 1, 2, 0, 4])
    fam = PathFamily.single(g, sigma, [(0, 1, 2, 3), (1,), (2,), (3, 2, 1, 0), (4,)])
    th = standard_thickness(fam)
    # two paths share each edge, F = 2 < length 3
    assert all(th.rho(0, k) == Fraction(1, 3) for k in range(3))


def test_swap_cost_p1():
    sol = solve_1d(Permutation(GridGraph(1, 2), [1, 0]))
    assert cost(sol, 1) == 2


def test_constructed_violations():
    g = GridGraph(1, 3)
    sigma = Permutation(g, [2, 1, 0])
    fam = PathFamily.single(g, sigma, [(0, 1, 2), (1,), (2, 1, 0)])
    sol = FlowSolution(fam, Thickness(fam, 1, [[1, 1], [], [1, 1]]))
    tc = check_time_constraint(sol)
    assert not tc.passed and tc.max_lhs == 2
    g2 = GridGraph(1, 2)
    s2 = Permutation(g2, [1, 0])
    f2 = PathFamily.single(g2, s2, [(0, 1), (1, 0)])
    sol2 = FlowSolution(f2, Thickness(f2, 1, [[1], [1]]))
    cc = check_capacity_constraint(sol2)
    assert not cc.passed and cc.max_lhs == 2
    assert not is_admissible(sol2)


def test_canonical_usage_is_three_quarters():
    # four canonical paths (0,0,0)->(3,2,1); three of them start with e1
    g = GridGraph(3, 4)
    v, w = (0, 0, 0), (3, 2, 1)
    sigma = Permutation.from_function(g, lambda x: w if x == v else v if x == w else x)
    paths = [tuple(g.index(x) for x in p) for p in canonical_family(v, w)]
    fam = PathFamily(g, sigma, paths, [g.index(v)] * 4, [Fraction(1, 4)] * 4, check=False)
    assert count_paths_brute(fam, ((0, 0, 0), (1, 0, 0))) == Fraction(3, 4)


def test_counterexample_lower_bound_p1_matches_sum():
    s = counterexample_permutation(8)
    want = sum(abs(v[0] - v[2]) + abs(2 * v[1] - 7) + abs(v[2] - v[0]) for v in s.graph.vertices())
    assert lower_bound(s, 1) == want


def test_solution_json_roundtrip():
    sol = build_solution(solve_1d(reversal4()).family)
    back = FlowSolution.from_json(sol.to_json())
    assert back.thickness.r == sol.thickness.r
    assert cost(back, 2) == pytest.approx(cost(sol, 2), rel=0, abs=0)
