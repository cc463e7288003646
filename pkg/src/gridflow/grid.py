"""Lattice graphs, permutations of lattice vertices, distances and norms.

Vertices are tuples of ints.  Internally most code works with flat row-major
indices, ``index = sum(v[i] * n**(nu-1-i))``, and with integer edge ids
``eid = lo * nu + axis`` where ``lo`` is the flat index of the endpoint with
the smaller coordinate along ``axis``.
"""
from __future__ import annotations

import enum
import json
import math
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence, Union

Vertex = tuple


class Inf(enum.Enum):
    INF = "inf"

    def __repr__(self) -> str:
        return "INF"


INF = Inf.INF
PValue = Union[int, float, Fraction, Inf]


def parse_p(text) -> PValue:
    if isinstance(text, Inf):
        return text
    s = str(text).strip().lower()
    if s in ("inf", "infinity", "oo"):
        return INF
    try:
        val = Fraction(s)
    except ValueError:
        raise ValueError(f"bad exponent {text!r}") from None
    if val < 1:
        raise ValueError(f"exponent must be >= 1, got {text!r}")
    return int(val) if val.denominator == 1 else val


@dataclass(frozen=True)
class GridGraph:
    nu: int
    n: int

    def __post_init__(self):
        if self.nu < 1 or self.n < 2:
            raise ValueError(f"need nu >= 1 and n >= 2, got nu={self.nu}, n={self.n}")

    @property
    def num_vertices(self) -> int:
        return self.n ** self.nu

    @property
    def num_edges(self) -> int:
        return self.nu * self.n ** (self.nu - 1) * (self.n - 1)

    def stride(self, axis: int) -> int:
        return self.n ** (self.nu - 1 - axis)

    def index(self, v: Sequence[int]) -> int:
        if len(v) != self.nu:
            raise ValueError(f"vertex {v} has wrong dimension for nu={self.nu}")
        idx = 0
        for c in v:
            if not 0 <= c < self.n:
                raise ValueError(f"vertex {tuple(v)} out of range for n={self.n}")
            idx = idx * self.n + c
        return idx

    def vertex(self, idx: int) -> Vertex:
        out = []
        for _ in range(self.nu):
            idx, r = divmod(idx, self.n)
            out.append(r)
        return tuple(reversed(out))

    def vertices(self) -> Iterator[Vertex]:
        for i in range(self.num_vertices):
            yield self.vertex(i)

    def coord(self, idx: int, axis: int) -> int:
        return (idx // self.stride(axis)) % self.n

    def edge_id(self, a: int, b: int) -> int:
        """Edge id of two adjacent flat indices (in either order)."""
        lo, hi = (a, b) if a < b else (b, a)
        d = hi - lo
        n, nu = self.n, self.nu
        st = 1
        for axis in range(nu - 1, -1, -1):
            if d == st:
                if (lo // st) % n < n - 1:
                    return lo * nu + axis
                break
            st *= n
        raise ValueError(f"{self.vertex(a)} and {self.vertex(b)} are not adjacent")

    def edge_of(self, v: Sequence[int], w: Sequence[int]) -> int:
        return self.edge_id(self.index(v), self.index(w))

    def edge_endpoints(self, eid: int) -> tuple[Vertex, Vertex]:
        lo, axis = divmod(eid, self.nu)
        return self.vertex(lo), self.vertex(lo + self.stride(axis))

    def edge_axis(self, eid: int) -> int:
        return eid % self.nu

    def edge_ids(self) -> Iterator[int]:
        for lo in range(self.num_vertices):
            for axis in range(self.nu):
                if self.coord(lo, axis) < self.n - 1:
                    yield lo * self.nu + axis

    def edges(self) -> Iterator[tuple[Vertex, Vertex]]:
        for eid in self.edge_ids():
            yield self.edge_endpoints(eid)


def canonical_edge(v: Sequence[int], w: Sequence[int]) -> tuple[Vertex, Vertex]:
    v, w = tuple(v), tuple(w)
    if manhattan_dist(v, w) != 1:
        raise ValueError(f"{v} and {w} are not adjacent")
    return (v, w) if v < w else (w, v)


def manhattan_dist(v: Sequence[int], w: Sequence[int]) -> int:
    if len(v) != len(w):
        raise ValueError(f"dimension mismatch: {len(v)} vs {len(w)}")
    return sum(abs(a - b) for a, b in zip(v, w))


class Permutation:
    """A bijection of the vertex set, stored as an array of flat indices."""

    __slots__ = ("graph", "mapping", "_dist", "_inv")

    def __init__(self, graph: GridGraph, mapping: Sequence[int]):
        mapping = tuple(int(x) for x in mapping)
        if len(mapping) != graph.num_vertices:
            raise ValueError(f"expected {graph.num_vertices} entries, got {len(mapping)}")
        if sorted(mapping) != list(range(graph.num_vertices)):
            raise ValueError("mapping is not a bijection of the vertex set")
        self.graph = graph
        self.mapping = mapping
        self._dist = None
        self._inv = None

    def __call__(self, v: Sequence[int]) -> Vertex:
        return self.graph.vertex(self.mapping[self.graph.index(v)])

    def __eq__(self, other) -> bool:
        return isinstance(other, Permutation) and self.graph == other.graph and self.mapping == other.mapping

    def __hash__(self) -> int:
        return hash((self.graph, self.mapping))

    def __repr__(self) -> str:
        return f"Permutation(nu={self.graph.nu}, n={self.graph.n})"

    @classmethod
    def identity(cls, graph: GridGraph) -> "Permutation":
        return cls(graph, range(graph.num_vertices))

    @classmethod
    def from_function(cls, graph: GridGraph, fn) -> "Permutation":
        return cls(graph, [graph.index(fn(v)) for v in graph.vertices()])

    @classmethod
    def random(cls, graph: GridGraph, seed: int) -> "Permutation":
        rng = random.Random(seed)
        m = list(range(graph.num_vertices))
        rng.shuffle(m)
        return cls(graph, m)

    @classmethod
    def random_planar(cls, graph: GridGraph, seed: int) -> "Permutation":
        """Random permutation that keeps every coordinate after the second fixed."""
        if graph.nu < 2:
            raise ValueError("planar permutations need nu >= 2")
        rng = random.Random(seed)
        plane = GridGraph(2, graph.n)
        layers = graph.n ** (graph.nu - 2)
        mapping = [0] * graph.num_vertices
        for rest in range(layers):
            m = list(range(plane.num_vertices))
            rng.shuffle(m)
            for src, dst in enumerate(m):
                mapping[src * layers + rest] = dst * layers + rest
        return cls(graph, mapping)

    def compose(self, other: "Permutation") -> "Permutation":
        """self after other."""
        return Permutation(self.graph, [self.mapping[i] for i in other.mapping])

    @property
    def inverse_mapping(self) -> tuple:
        if self._inv is None:
            inv = [0] * len(self.mapping)
            for i, j in enumerate(self.mapping):
                inv[j] = i
            self._inv = tuple(inv)
        return self._inv

    def inverse(self) -> "Permutation":
        return Permutation(self.graph, self.inverse_mapping)

    def is_identity(self) -> bool:
        return all(i == j for i, j in enumerate(self.mapping))

    def fixes_trailing_coords(self) -> bool:
        """True when only the first two coordinates move (the class S^2 for nu=3)."""
        g = self.graph
        if g.nu < 2:
            return True
        layers = g.n ** (g.nu - 2)
        return all(i % layers == j % layers for i, j in enumerate(self.mapping))

    def distances(self) -> list[int]:
        if self._dist is None:
            g = self.graph
            self._dist = [manhattan_dist(g.vertex(i), g.vertex(j)) for i, j in enumerate(self.mapping)]
        return self._dist

    def to_json(self) -> str:
        return json.dumps({"nu": self.graph.nu, "n": self.graph.n, "perm": list(self.mapping)})

    @classmethod
    def from_json(cls, text: str) -> "Permutation":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError("permutation file must hold a JSON object")
        unknown = set(data) - {"nu", "n", "perm"}
        if unknown:
            raise ValueError(f"unknown keys in permutation file: {sorted(unknown)}")
        try:
            nu, n, perm = data["nu"], data["n"], data["perm"]
        except KeyError as exc:
            raise ValueError(f"missing key {exc.args[0]!r}") from None
        if not (isinstance(nu, int) and isinstance(n, int) and isinstance(perm, list)):
            raise ValueError("nu and n must be integers and perm a list")
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in perm):
            raise ValueError("perm entries must be integers")
        return cls(GridGraph(nu, n), perm)


def power_sum(values: Sequence[int], p: int) -> int:
    return sum(x ** p for x in values)


def displacement_norm(sigma: Permutation, p: PValue):
    """l^p norm of v -> dist(v, sigma(v)).

    Exact (int or Fraction) for p = 1 and p = inf, float otherwise.  Use
    :func:`displacement_power_sum` for exact comparisons at integer p.
    """
    d = sigma.distances()
    if p is INF:
        return max(d, default=0)
    if p == 1:
        return sum(d)
    if isinstance(p, int):
        s = power_sum(d, p)
        r = round(s ** (1.0 / p))
        return r if r ** p == s else s ** (1.0 / p)
    return sum(float(x) ** float(p) for x in d) ** (1.0 / float(p))


def displacement_power_sum(sigma: Permutation, p: int) -> int:
    return power_sum(sigma.distances(), p)


def edge_order_compare(graph: GridGraph, eid: int, g1: int, g2: int, family) -> int:
    """Compare two paths through edge ``eid`` in the stacking order used on highways.

    Returns -1 if ``g1`` comes first, 1 if ``g2`` does, 0 if they are the same
    path.  On an edge along axis 1 (the second axis) forward traversals come
    first, forward ones in increasing owner order and backward ones in
    decreasing owner order.  Along axis 0 the roles of the two directions are
    swapped.  Owners are compared lexicographically as vertices.
    """
    if g1 == g2:
        return 0
    axis = graph.edge_axis(eid)
    if axis > 1:
        raise ValueError("edge order is only defined for edges along the first two axes")
    d1 = family.direction(g1, eid)
    d2 = family.direction(g2, eid)
    o1, o2 = family.owner[g1], family.owner[g2]
    if o1 == o2:
        raise ValueError(f"paths {g1} and {g2} share the owner vertex {graph.vertex(o1)}")
    first = +1 if axis == 1 else -1
    if d1 != d2:
        return -1 if d1 == first else 1
    # flat index order equals lexicographic vertex order
    lex = -1 if o1 < o2 else 1
    return lex if d1 == first else -lex
