import itertools

import pytest

from gridflow.discrete_flow import PathFamily
from gridflow.grid import (INF, GridGraph, Permutation, displacement_norm, edge_order_compare,
                           manhattan_dist, parse_p)


@pytest.mark.parametrize("nu,n", [(1, 5), (2, 4), (3, 3)])
def test_vertex_and_edge_sets(nu, n):
    g = GridGraph(nu, n)
    verts = list(g.vertices())
    assert sorted(verts) == sorted(itertools.product(range(n), repeat=nu))
    edges = {tuple(sorted(e)) for e in g.edges()}
    want = {tuple(sorted((a, b))) for a in verts for b in verts if manhattan_dist(a, b) == 1}
    assert edges == want
    assert g.num_edges == nu * n ** (nu - 1) * (n - 1) == len(edges)


def test_index_roundtrip_and_edge_ids():
    g = GridGraph(3, 4)
    for i in range(g.num_vertices):
        assert g.index(g.vertex(i)) == i
    for eid in g.edge_ids():
        a, b = g.edge_endpoints(eid)
        assert g.edge_of(a, b) == eid == g.edge_of(b, a)


def test_manhattan():
    assert manhattan_dist((0, 0, 0), (0, 0, 0)) == 0
    assert manhattan_dist((0, 1), (1, 0)) == 2
    assert manhattan_dist((0, 0, 0), (3, 2, 1)) == 6


def test_displacement_norm():
    g1 = GridGraph(1, 2)
    assert displacement_norm(Permutation.identity(GridGraph(2, 3)), 2) == 0
    assert displacement_norm(Permutation(g1, [1, 0]), 1) == 2
    assert displacement_norm(Permutation(GridGraph(1, 4), [3, 2, 1, 0]), INF) == 3


def test_permutation_validation_and_json():
    g = GridGraph(2, 3)
    with pytest.raises(ValueError):
        Permutation(g, [0] * 9)
    s = Permutation.random(g, 7)
    assert Permutation.from_json(s.to_json()) == s
    assert s.compose(s.inverse()).is_identity()
    with pytest.raises(ValueError):
        Permutation.from_json('{"nu": 2, "n": 3, "perm": [0], "extra": 1}')


def test_random_planar_fixes_third_coordinate():
    s = Permutation.random_planar(GridGraph(3, 4), 3)
    assert s.fixes_trailing_coords()
    assert all(s(v)[2] == v[2] for v in s.graph.vertices())


def test_parse_p():
    assert parse_p("inf") is INF
    assert parse_p("2") == 2
    with pytest.raises(ValueError):
        parse_p("0.5")


def _family(g, sigma, paths):
    return PathFamily.single(g, sigma, [tuple(g.index(x) for x in p) for p in paths])


def test_edge_order_forward_before_backward():
    g = GridGraph(3, 2)
    # (0,0,0) -> (0,1,0) forward along e2, (0,1,1)... use a swap on the e2 edge
    sigma = Permutation.from_function(g, lambda v: (v[0], 1 - v[1], v[2]) if v[0] == 0 and v[2] == 0 else v)
    fam = _family(g, sigma, [[v, sigma(v)] if v != sigma(v) else [v] for v in g.vertices()])
    e = g.edge_of((0, 0, 0), (0, 1, 0))
    up = fam.by_owner[g.index((0, 0, 0))][0]
    down = fam.by_owner[g.index((0, 1, 0))][0]
    assert edge_order_compare(g, e, up, down, fam) == -1
    assert edge_order_compare(g, e, down, up, fam) == 1
    assert edge_order_compare(g, e, up, up, fam) == 0


def test_edge_order_two_forward_paths_lexicographic():
    g = GridGraph(3, 3)
    # (0,0,0) -> (0,2,0) and (0,1,0) -> ... both forward over {(0,1,0),(0,2,0)}
    m = {(0, 0, 0): (0, 2, 0), (0, 1, 0): (0, 0, 0), (0, 2, 0): (0, 1, 0)}
    sigma = Permutation.from_function(g, lambda v: m.get(v, v))
    paths = []
    for v in g.vertices():
        w = sigma(v)
        if v == (0, 1, 0):
            paths.append([(0, 1, 0), (0, 0, 0)])
        elif v == (0, 2, 0):
            paths.append([(0, 2, 0), (0, 1, 0)])
        elif v == (0, 0, 0):
            paths.append([(0, 0, 0), (0, 1, 0), (0, 2, 0)])
        else:
            paths.append([v])
    fam = _family(g, sigma, paths)
    e = g.edge_of((0, 1, 0), (0, 2, 0))
    a = fam.by_owner[g.index((0, 0, 0))][0]
    b = fam.by_owner[g.index((0, 2, 0))][0]
    # forward (0,0,0) path goes first, then the backward one
    assert edge_order_compare(g, e, a, b, fam) == -1


def test_edge_order_two_forward_owners():
    from gridflow.solvers import solve_single_path
    g = GridGraph(3, 4)
    m = {(0, 0, 0): (0, 2, 0), (0, 1, 0): (0, 3, 0), (0, 2, 0): (0, 0, 0), (0, 3, 0): (0, 1, 0)}
    sigma = Permutation.from_function(g, lambda v: m.get(v, v))
    fam = solve_single_path(sigma).family
    e = g.edge_of((0, 1, 0), (0, 2, 0))
    a = fam.by_owner[g.index((0, 0, 0))][0]
    b = fam.by_owner[g.index((0, 1, 0))][0]
    assert fam.direction(a, e) == fam.direction(b, e) == 1
    assert edge_order_compare(g, e, a, b, fam) == -1
