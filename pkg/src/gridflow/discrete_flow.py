"""Path families, thicknesses, admissibility checks and costs, in exact arithmetic.

A path is a tuple of flat vertex indices.  Paths are numbered globally inside
a :class:`PathFamily`; the number is the path id.  Weights are kept as
integers over one common denominator ``W`` and thicknesses as ``Q / r`` with
one common integer ``Q`` and integer ``r`` per (path, edge slot).  Every
cost and constraint then reduces to integer sums.
"""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import mpmath

from .grid import INF, GridGraph, Inf, Permutation, PValue, displacement_norm

Path = tuple


def path_edges(graph: GridGraph, path: Sequence[int]) -> list[int]:
    return [graph.edge_id(a, b) for a, b in zip(path, path[1:])]


def validate_path(graph: GridGraph, path: Sequence[int]) -> None:
    if len(set(path)) != len(path):
        raise ValueError("path repeats a vertex")
    for a, b in zip(path, path[1:]):
        graph.edge_id(a, b)


class PathFamily:
    """Per-vertex path sets Gamma_v with decomposition weights.

    ``paths[g]`` is the g-th path, ``owner[g]`` its start vertex and
    ``weight[g]`` its weight; weights of one owner sum to one.
    """

    def __init__(self, graph: GridGraph, sigma: Permutation, paths: Sequence[Path],
                 owner: Sequence[int], weight: Sequence[Fraction], check: bool = True):
        self.graph = graph
        self.sigma = sigma
        self.paths = [tuple(p) for p in paths]
        self.owner = list(owner)
        self.weight = [Fraction(w) for w in weight]
        if not (len(self.paths) == len(self.owner) == len(self.weight)):
            raise ValueError("paths, owners and weights differ in length")
        self.by_owner: dict[int, list[int]] = defaultdict(list)
        for g, o in enumerate(self.owner):
            self.by_owner[o].append(g)
        self.W = math.lcm(*(w.denominator for w in self.weight)) if self.weight else 1
        self.wnum = [int(w * self.W) for w in self.weight]
        self.edges = [path_edges(graph, p) for p in self.paths]
        if check:
            self.validate()

    def validate(self) -> None:
        n_v = self.graph.num_vertices
        for g, p in enumerate(self.paths):
            o = self.owner[g]
            if p[0] != o or p[-1] != self.sigma.mapping[o]:
                raise ValueError(f"path {g} does not run from its owner to the owner's image")
            if len(set(p)) != len(p):
                raise ValueError(f"path {g} repeats a vertex")
            if not 0 < self.weight[g] <= 1:
                raise ValueError(f"path {g} has weight {self.weight[g]} outside (0, 1]")
        for v in range(n_v):
            ids = self.by_owner.get(v)
            if not ids:
                raise ValueError(f"vertex {self.graph.vertex(v)} has no path")
            if sum(self.wnum[g] for g in ids) != self.W:
                raise ValueError(f"weights of vertex {self.graph.vertex(v)} do not sum to 1")

    def __len__(self) -> int:
        return len(self.paths)

    def length(self, g: int) -> int:
        return len(self.paths[g]) - 1

    def direction(self, g: int, eid: int) -> int:
        """+1 if path g crosses edge eid from its lower endpoint, -1 if from the upper."""
        lo = eid // self.graph.nu
        p = self.paths[g]
        for k, e in enumerate(self.edges[g]):
            if e == eid:
                return 1 if p[k] == lo else -1
        raise ValueError(f"path {g} does not traverse edge {self.graph.edge_endpoints(eid)}")

    def through(self, eid: int) -> list[int]:
        return self.edge_index.get(eid, [])

    @property
    def edge_index(self) -> dict[int, list[int]]:
        idx = getattr(self, "_edge_index", None)
        if idx is None:
            idx = defaultdict(list)
            for g, es in enumerate(self.edges):
                for e in es:
                    idx[e].append(g)
            self._edge_index = idx
        return idx

    @classmethod
    def single(cls, graph: GridGraph, sigma: Permutation, paths: Sequence[Path]) -> "PathFamily":
        """One path per vertex, unit weights (the one-path problem)."""
        return cls(graph, sigma, paths, range(len(paths)), [Fraction(1)] * len(paths))

    @classmethod
    def uniform(cls, graph: GridGraph, sigma: Permutation,
                per_vertex: Sequence[Sequence[Path]]) -> "PathFamily":
        paths, owner, weight = [], [], []
        for v, ps in enumerate(per_vertex):
            w = Fraction(1, len(ps))
            for p in ps:
                paths.append(p)
                owner.append(v)
                weight.append(w)
        return cls(graph, sigma, paths, owner, weight)


class Thickness:
    """Thickness rho(e, g) = Q / r[g][k] on the k-th edge of path g."""

    def __init__(self, family: PathFamily, Q: int, r: Sequence[Sequence[int]]):
        self.family = family
        self.Q = int(Q)
        self.r = [tuple(int(x) for x in row) for row in r]
        if len(self.r) != len(family):
            raise ValueError("one thickness row per path is required")
        for g, row in enumerate(self.r):
            if len(row) != len(family.edges[g]):
                raise ValueError(f"thickness row {g} does not match the path length")
            if any(x < self.Q for x in row):
                raise ValueError("thickness values must lie in (0, 1]")

    @classmethod
    def from_fractions(cls, family: PathFamily, rows: Sequence[Sequence[Fraction]]) -> "Thickness":
        nums = [Fraction(x).numerator for row in rows for x in row]
        for row in rows:
            for x in row:
                if Fraction(x) <= 0:
                    raise ValueError("zero or negative thickness on a path edge")
        Q = math.lcm(*nums) if nums else 1
        return cls(family, Q, [[Q * Fraction(x).denominator // Fraction(x).numerator for x in row] for row in rows])

    def rho(self, g: int, k: int) -> Fraction:
        return Fraction(self.Q, self.r[g][k])

    def lookup(self, eid: int, g: int) -> Fraction:
        es = self.family.edges[g]
        for k, e in enumerate(es):
            if e == eid:
                return self.rho(g, k)
        raise KeyError((eid, g))

    def items(self) -> Iterable[tuple[int, int, Fraction]]:
        for g, es in enumerate(self.family.edges):
            for k, e in enumerate(es):
                yield e, g, self.rho(g, k)


@dataclass
class ConstraintReport:
    name: str
    passed: bool
    max_lhs: Fraction
    worst: Optional[int]
    slack: Fraction

    def as_dict(self, graph: Optional[GridGraph] = None) -> dict:
        worst = self.worst
        if graph is not None and worst is not None and self.name == "capacity":
            worst = [list(x) for x in graph.edge_endpoints(worst)]
        return {"passed": self.passed, "max_lhs": frac_str(self.max_lhs),
                "worst": worst, "slack": frac_str(self.slack)}


def reciprocal_sum(values: Iterable[int]) -> Fraction:
    """Exact sum of 1/x over integers, grouped by value."""
    total = Fraction(0)
    for x, c in Counter(values).items():
        total += Fraction(c, x)
    return total


class FlowSolution:
    """Graph, permutation, path family and thickness.  Immutable by convention."""

    def __init__(self, family: PathFamily, thickness: Thickness):
        if thickness.family is not family:
            raise ValueError("thickness was built for a different family")
        self.graph = family.graph
        self.sigma = family.sigma
        self.family = family
        self.thickness = thickness
        self._usage = None

    @property
    def usage_num(self) -> dict[int, int]:
        """Usage times the common weight denominator W, per edge."""
        if self._usage is None:
            acc: dict[int, int] = defaultdict(int)
            for g, es in enumerate(self.family.edges):
                w = self.family.wnum[g]
                for e in es:
                    acc[e] += w
            self._usage = dict(acc)
        return self._usage

    def usage(self, eid: int) -> Fraction:
        return Fraction(self.usage_num.get(eid, 0), self.family.W)

    def usage_map(self) -> dict[int, Fraction]:
        W = self.family.W
        return {e: Fraction(u, W) for e, u in self.usage_num.items()}

    def to_json(self) -> str:
        g = self.graph
        fam = self.family
        data = {
            "nu": g.nu, "n": g.n, "perm": list(self.sigma.mapping),
            "paths": [{"owner": fam.owner[k], "vertices": list(p), "weight": frac_str(fam.weight[k]),
                       "rho": [frac_str(self.thickness.rho(k, j)) for j in range(len(p) - 1)]}
                      for k, p in enumerate(fam.paths)],
        }
        return json.dumps(data)

    @classmethod
    def from_json(cls, text: str) -> "FlowSolution":
        data = json.loads(text)
        graph = GridGraph(data["nu"], data["n"])
        sigma = Permutation(graph, data["perm"])
        ps = data["paths"]
        fam = PathFamily(graph, sigma, [p["vertices"] for p in ps], [p["owner"] for p in ps],
                         [Fraction(p["weight"]) for p in ps])
        th = Thickness.from_fractions(fam, [[Fraction(x) for x in p["rho"]] for p in ps])
        return cls(fam, th)


def frac_str(x) -> str:
    x = Fraction(x)
    return f"{x.numerator}/{x.denominator}"


def usage(sol: FlowSolution, eid: int) -> Fraction:
    return sol.usage(eid)


def check_time_constraint(sol: FlowSolution) -> ConstraintReport:
    Q = sol.thickness.Q
    worst, max_lhs = None, Fraction(0)
    for g, row in enumerate(sol.thickness.r):
        if not row:
            continue
        lhs = Q * reciprocal_sum(row)
        if worst is None or lhs > max_lhs:
            worst, max_lhs = g, lhs
    return ConstraintReport("time", max_lhs <= 1, max_lhs, worst, 1 - max_lhs)


def check_capacity_constraint(sol: FlowSolution) -> ConstraintReport:
    fam, th = sol.family, sol.thickness
    per_edge: dict[int, dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for g, es in enumerate(fam.edges):
        w = fam.wnum[g]
        row = th.r[g]
        for k, e in enumerate(es):
            per_edge[e][row[k]] += w
    worst, max_lhs = None, Fraction(0)
    for e, groups in per_edge.items():
        # one common denominator per edge keeps the sum exact and cheap
        L = math.lcm(*groups)
        lhs = Fraction(th.Q * sum(w * (L // r) for r, w in groups.items()), fam.W * L)
        if worst is None or lhs > max_lhs:
            worst, max_lhs = e, lhs
    return ConstraintReport("capacity", max_lhs <= 1, max_lhs, worst, 1 - max_lhs)


def is_admissible(sol: FlowSolution) -> bool:
    return check_time_constraint(sol).passed and check_capacity_constraint(sol).passed


def cost_power_sum(sol: FlowSolution, p: int) -> Fraction:
    """Exact c_p^p = sum_g sum_e omega * rho^(1-p) for integer p >= 1."""
    if not isinstance(p, int) or p < 1:
        raise ValueError("exact power sums need an integer p >= 1")
    fam, th = sol.family, sol.thickness
    total = 0
    for g, row in enumerate(th.r):
        if row:
            total += fam.wnum[g] * sum(x ** (p - 1) for x in row)
    return Fraction(total, fam.W * th.Q ** (p - 1))


def cost_sup(sol: FlowSolution) -> Fraction:
    m = max((max(row) for row in sol.thickness.r if row), default=0)
    return Fraction(m, sol.thickness.Q)


def cost(sol: FlowSolution, p: PValue):
    """c_p of the solution.

    Fraction for p = 1 and p = inf, a float for other p (integer p rounds the
    exact power sum; fractional p uses 100-bit mpmath arithmetic).
    """
    if p is INF:
        return cost_sup(sol)
    if p == 1:
        return cost_power_sum(sol, 1)
    if isinstance(p, int):
        s = cost_power_sum(sol, p)
        return float(mpmath.root(mpmath.mpf(s.numerator) / s.denominator, p))
    with mpmath.workprec(100):
        pp = mpmath.mpf(Fraction(p).numerator) / Fraction(p).denominator
        fam, th = sol.family, sol.thickness
        total = mpmath.mpf(0)
        for g, row in enumerate(th.r):
            for x in row:
                total += mpmath.mpf(fam.wnum[g]) * mpmath.power(mpmath.mpf(x) / th.Q, pp - 1)
        return float(mpmath.power(total / fam.W, 1 / pp))


def lower_bound(sigma: Permutation, p: PValue):
    return displacement_norm(sigma, p)


def standard_thickness(family: PathFamily) -> Thickness:
    """rho(e, g) = 1 / max(F(e), len(g)), with F computed from the family's weights."""
    W = family.W
    acc: dict[int, int] = defaultdict(int)
    for g, es in enumerate(family.edges):
        for e in es:
            acc[e] += family.wnum[g]
    rows = []
    for g, es in enumerate(family.edges):
        lw = len(es) * W
        rows.append([max(acc[e], lw) for e in es])
    return Thickness(family, W, rows)


def build_solution(family: PathFamily) -> FlowSolution:
    return FlowSolution(family, standard_thickness(family))
