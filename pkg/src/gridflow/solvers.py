"""Explicit path-family constructions and their closed-form edge usages."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .discrete_flow import FlowSolution, PathFamily, build_solution
from .grid import GridGraph, Permutation, Vertex, manhattan_dist


def _segment(path: list, axis: int, target: int) -> None:
    """Extend ``path`` (list of vertex tuples) along ``axis`` until coordinate = target."""
    cur = list(path[-1])
    step = 1 if target > cur[axis] else -1
    while cur[axis] != target:
        cur[axis] += step
        path.append(tuple(cur))


def axis_path(v: Sequence[int], w: Sequence[int], order: Sequence[int]) -> list[Vertex]:
    """Shortest path fixing the coordinates in the given axis order."""
    path = [tuple(v)]
    for axis in order:
        _segment(path, axis, w[axis])
    return path


def single_path_family(v: Sequence[int], w: Sequence[int]) -> list[Vertex]:
    """Correct coordinate 1, then 2, and so on."""
    return axis_path(v, w, range(len(v)))


def _family_from_vertex_paths(graph: GridGraph, sigma: Permutation, per_vertex) -> PathFamily:
    idx = graph.index
    return PathFamily.uniform(graph, sigma, [[tuple(idx(x) for x in p) for p in ps] for ps in per_vertex])


def solve_single_path(sigma: Permutation) -> FlowSolution:
    g = sigma.graph
    paths = []
    for v in range(g.num_vertices):
        p = single_path_family(g.vertex(v), g.vertex(sigma.mapping[v]))
        paths.append(tuple(g.index(x) for x in p))
    return build_solution(PathFamily.single(g, sigma, paths))


def solve_1d(sigma: Permutation) -> FlowSolution:
    if sigma.graph.nu != 1:
        raise ValueError("solve_1d needs nu = 1")
    paths = []
    for v, w in enumerate(sigma.mapping):
        step = 1 if w >= v else -1
        paths.append(tuple(range(v, w + step, step)))
    return build_solution(PathFamily.single(sigma.graph, sigma, paths))


def solve_2d(sigma: Permutation) -> FlowSolution:
    if sigma.graph.nu != 2:
        raise ValueError("solve_2d needs nu = 2")
    return solve_single_path(sigma)


def predict_usage_1d(sigma: Permutation, k: int) -> int:
    """Paths over the edge {k, k+1}: points crossing from right to left plus left to right."""
    m = sigma.mapping
    return sum(1 for j in range(k + 1, len(m)) if m[j] <= k) + sum(1 for j in range(k + 1) if m[j] > k)


def predict_usage_1d_all(sigma: Permutation) -> list[int]:
    """predict_usage_1d for every k via prefix counts."""
    m = sigma.mapping
    n = len(m)
    out = []
    pos = [0] * n
    for j, t in enumerate(m):
        pos[t] = j
    cnt = 0
    for k in range(n - 1):
        # left block {0..k}; crossings = #left with image > k (equal to #right with image <= k)
        if m[k] > k:
            cnt += 1
        # vertex with image k: if it lies in the left block it stops counting once k reached
        j = pos[k]
        if j < k:
            cnt -= 1
        out.append(2 * cnt)
    return out


def predict_usage_2d(sigma: Permutation, edge: tuple[Vertex, Vertex]) -> int:
    """Closed forms for the first-coordinate-then-second paths.

    Horizontal edge {(i,k),(i+1,k)}: the 1D count for the first coordinate in
    row k.  Vertical edge {(i,k),(i,k+1)}: vertices landing in column i whose
    second-coordinate move crosses k + 1/2.
    """
    g = sigma.graph
    if g.nu != 2:
        raise ValueError("predict_usage_2d needs nu = 2")
    a, b = sorted(edge)
    if manhattan_dist(a, b) != 1:
        raise ValueError("not an edge")
    n = g.n
    if a[1] == b[1]:
        i, k = a[0], a[1]
        row = [sigma((j, k))[0] for j in range(n)]
        return sum(1 for j in range(i + 1, n) if row[j] <= i) + sum(1 for j in range(i + 1) if row[j] > i)
    i, k = a[0], a[1]
    inv = sigma.inverse_mapping
    count = 0
    # only preimages of column i use its vertical edges
    for t in range(n):
        v1 = g.vertex(inv[g.index((i, t))])[1]
        if (v1 <= k < t) or (t <= k < v1):
            count += 1
    return count


@dataclass(frozen=True)
class CanonicalFrame:
    """Axis relabeling plus reflections taking (v, w) to a normal form.

    Frame coordinate k measures ``sign[k] * (x[axes[k]] - origin[axes[k]])``.
    In the frame v sits at 0 and w at ``gaps`` with gaps sorted descending.
    """

    origin: Vertex
    axes: tuple
    sign: tuple
    gaps: tuple

    @classmethod
    def of(cls, v: Sequence[int], w: Sequence[int]) -> "CanonicalFrame":
        nu = len(v)
        d = [w[i] - v[i] for i in range(nu)]
        axes = tuple(sorted(range(nu), key=lambda i: (-abs(d[i]), i)))
        sign = tuple(-1 if d[i] < 0 else 1 for i in axes)
        gaps = tuple(abs(d[i]) for i in axes)
        return cls(tuple(v), axes, sign, gaps)

    def to_frame(self, x: Sequence[int]) -> tuple:
        return tuple(s * (x[i] - self.origin[i]) for i, s in zip(self.axes, self.sign))

    def from_frame(self, y: Sequence[int]) -> Vertex:
        out = list(self.origin)
        for k, (i, s) in enumerate(zip(self.axes, self.sign)):
            out[i] = self.origin[i] + s * y[k]
        return tuple(out)


def alpha_range(gaps: Sequence[int]) -> list[tuple]:
    nu = len(gaps)
    return list(itertools.product(*(range(a + 1) for a in gaps[: max(nu - 2, 0)])))


def frame_path(gaps: Sequence[int], alpha: Sequence[int]) -> list[tuple]:
    """The path gamma^alpha in frame coordinates (all steps positive)."""
    nu = len(gaps)
    target = [0] * nu
    path = [tuple(target)]

    def go(axis, amount):
        for _ in range(amount):
            target[axis] += 1
            path.append(tuple(target))

    for j, aj in enumerate(alpha):
        go(j, aj)
    for axis in range(max(nu - 2, 0), nu):
        go(axis, gaps[axis])
    for j in range(len(alpha) - 1, -1, -1):
        go(j, gaps[j] - alpha[j])
    return path


def canonical_family(v: Sequence[int], w: Sequence[int]) -> list[list[Vertex]]:
    """Gamma_v: one path per alpha, product of (a_j + 1) paths in total.

    When all gaps past the first nu-2 vanish several alphas give the same
    vertex sequence; copies are kept so the count and the weights follow the
    product formula.
    """
    fr = CanonicalFrame.of(v, w)
    return [[fr.from_frame(y) for y in frame_path(fr.gaps, a)] for a in alpha_range(fr.gaps)]


def solve_multi(sigma: Permutation) -> FlowSolution:
    """Canonical families with uniform weights and standard thickness (any nu)."""
    g = sigma.graph
    per_vertex = [canonical_family(g.vertex(v), g.vertex(w)) for v, w in enumerate(sigma.mapping)]
    return build_solution(_family_from_vertex_paths(g, sigma, per_vertex))


def solve(sigma: Permutation, single_path: bool = False) -> FlowSolution:
    nu = sigma.graph.nu
    if single_path:
        return solve_single_path(sigma)
    if nu == 1:
        return solve_1d(sigma)
    if nu == 2:
        return solve_2d(sigma)
    return solve_multi(sigma)


def counterexample_permutation(n: int) -> Permutation:
    g = GridGraph(3, n)
    return Permutation.from_function(g, lambda v: (v[2], n - 1 - v[1], v[0]))


def counterexample_usage(n: int, edge: tuple[Vertex, Vertex]) -> int:
    """Usage of a diagonal edge {(i,j,i),(i,j+1,i)} under single paths.

    Counting the middle segments on the line (i, ., i): 2N * min(j+1, N-1-j).
    """
    a, b = sorted(edge)
    if not (a[0] == a[2] == b[0] == b[2] and b[1] == a[1] + 1):
        raise ValueError("edge must have the form {(i,j,i),(i,j+1,i)}")
    j = a[1]
    return 2 * n * min(j + 1, n - 1 - j)


def counterexample_census(sol: FlowSolution, threshold) -> int:
    return sum(1 for u in sol.usage_map().values() if u >= threshold)


def certified_sup_lower_bound(sol: FlowSolution) -> Fraction:
    """max_e F(e): any admissible thickness has some rho <= 1/F(e) on every edge."""
    return max(sol.usage_map().values(), default=Fraction(0))


@dataclass(frozen=True)
class VisitFraction:
    m: int
    bound: Fraction
    measured: Fraction
    case: str


def visit_fraction_bound(v: Sequence[int], w: Sequence[int], z: Sequence[int]) -> VisitFraction:
    nu = len(v)
    if nu < 3:
        raise ValueError("visit_fraction_bound needs nu >= 3")
    fam = canonical_family(v, w)
    z = tuple(z)
    hits = sum(1 for p in fam if z in p)
    measured = Fraction(hits, len(fam))
    m = max(sum(1 for i in range(nu) if z[i] == v[i]), sum(1 for i in range(nu) if z[i] == w[i]))
    if m == 0:
        case, bound = "a", Fraction(0)
    elif m >= nu - 1:
        case, bound = "b", Fraction(1)
    else:
        gaps = CanonicalFrame.of(v, w).gaps
        bound = Fraction(1)
        for j in range(nu - m - 1):
            bound /= gaps[j] + 1
        case = "c"
    if measured > bound:
        raise AssertionError(f"visit fraction {measured} exceeds bound {bound} at z={z}")
    return VisitFraction(m, bound, measured, case)
