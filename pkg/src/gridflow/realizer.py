"""Continuum realization of planar cube permutations.

A round moves one subcube of every moving grid cube to the same subcube of
the target cube.  Fluid leaves each subcube through its gate, runs through a
pipe network laid out in the layer above the subcubes and enters the gate of
the target subcube.  A second half of the round runs every pipe backwards so
only subcube contents end up displaced.

Units are absolute.  Each cube has a canonical frame in which the active
subcube is [0, l]^3, the gate sits on its x = l face and the network band is
z in [l, 2l]; the frame is reflected on every axis where the subcube offset
is K - 1, which keeps the band and the side rooms inside the cube.
"""
from __future__ import annotations

import functools
import itertools
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .continuum import (Chain, Corner, CubeFlow, GeometryError, Isometry, Piece, PiecewiseField,
                        Rect2D, Reversed, TimeScaled, gate_shortcut, lp_norm, parallel_field,
                        pipe_width_field)
from .discrete_flow import FlowSolution
from .grid import GridGraph, Permutation, displacement_norm, edge_order_compare
from .solvers import solve_single_path

C_TH = 2 * (1 + math.e ** 2)
N_LEVELS = 14


class ScopeError(ValueError):
    """Input outside what the realizer supports."""


# ---------------------------------------------------------------- layout

@dataclass
class Layout:
    N: int
    K: int
    kappa: int
    mode: str = "relaxed"
    flags: dict = field(default_factory=dict)

    @property
    def l_exact(self) -> Fraction:
        return Fraction(1, self.N * self.K)

    @property
    def l(self) -> float:
        return 1.0 / (self.N * self.K)

    @property
    def lam(self) -> float:
        return self.l / self.kappa

    @property
    def eps(self) -> float:
        """Gate width lam / 2."""
        return self.lam / 2

    @property
    def mu0(self) -> float:
        return 8 * self.l * self.kappa + 4 * self.lam

    @property
    def pitch(self) -> float:
        return 0.9 * self.l / N_LEVELS

    @property
    def eta(self) -> float:
        """Pipe height inside the band; C_TH slab heights fit one pitch."""
        return self.pitch / C_TH

    @property
    def flux(self) -> float:
        return self.mu0 * self.eps * self.l

    def gate_transit_exact(self) -> Fraction:
        l = self.l_exact
        lam = l / self.kappa
        return (2 * l * self.kappa + lam) / (8 * l * self.kappa + 4 * lam)

    def level_span(self, k: int) -> tuple:
        """Canonical z interval of level k."""
        lo = self.l + 0.05 * self.l + (k - 1) * self.pitch
        return (lo, lo + self.eta)

    def to_dict(self) -> dict:
        return {"N": self.N, "K": self.K, "kappa": self.kappa, "mode": self.mode,
                "l": self.l, "lambda": self.lam, "mu0": self.mu0, "c_th": C_TH,
                "eta": self.eta, "pitch": self.pitch,
                "gate_transit": str(self.gate_transit_exact())}


def derive_layout(N: int, K: int, kappa: int, mode: str = "relaxed") -> Layout:
    """Derived constants plus the list of strict-regime inequalities and their status."""
    for name, v in (("N", N), ("K", K), ("kappa", kappa)):
        if not isinstance(v, int) or v < 1:
            raise ValueError(f"{name} must be a positive integer")
    if mode not in ("strict", "relaxed"):
        raise ValueError(f"unknown mode {mode!r}")
    lay = Layout(N, K, kappa, mode)
    l = lay.l_exact
    P = 17 * C_TH * float(l)
    checks = {
        "K > 1000": K > 1000,
        "kappa > 16K": kappa > 16 * K,
        "4 l kappa / K <= 1/32": 4 * l * kappa / K <= Fraction(1, 32),
        "base point window nonempty": P < 1.0 / N - P,
        "lambda < l": kappa > 1,
    }
    lay.flags = {k: bool(v) for k, v in checks.items()}
    if lay.gate_transit_exact() != Fraction(1, 4):
        raise AssertionError("gate transit identity failed")
    if mode == "strict":
        bad = [k for k, v in checks.items() if not v]
        if bad:
            raise ScopeError("strict layout violates: " + "; ".join(bad))
    if K < 2:
        raise ScopeError("the band and side rooms need K >= 2")
    if kappa < 4:
        raise ScopeError("kappa >= 4 is needed for the connector geometry")
    return lay


# ---------------------------------------------------------------- levels

_E1P, _E1M, _E2P, _E2M = (0, 1), (0, -1), (1, 1), (1, -1)
LEVEL_TABLE = {
    (_E2M, _E2P): 1, (_E2P, _E2M): 2,
    (_E1M, _E2P): 3, (_E1M, _E2M): 4,
    (_E1P, _E2P): 5, (_E1P, _E2M): 6,
    (_E2M, _E1P): 7, (_E2M, _E1M): 8,
    (_E2P, _E1P): 9, (_E2P, _E1M): 10,
    (_E1P, _E1M): 11, (_E1M, _E1P): 12,
}


def _offset(v, w) -> tuple:
    d = [b - a for a, b in zip(v, w)]
    nz = [k for k, x in enumerate(d) if x]
    if len(nz) != 1 or abs(d[nz[0]]) != 1 or nz[0] > 1:
        raise ValueError(f"{v} and {w} are not planar neighbours")
    return (nz[0], d[nz[0]])


def level_of(path: Sequence, v) -> int:
    """Level of the pair (path, vertex); ``path`` is a sequence of vertex tuples."""
    path = [tuple(p) for p in path]
    v = tuple(v)
    if v not in path:
        raise ValueError(f"{v} is not on the path")
    i = path.index(v)
    if i == len(path) - 1:
        return 14
    if i == 0:
        return 13
    return LEVEL_TABLE[(_offset(v, path[i - 1]), _offset(v, path[i + 1]))]


# ---------------------------------------------------------------- pipe builder

def _unit(axis: int, sign: int = 1) -> np.ndarray:
    e = np.zeros(3)
    e[axis] = sign
    return e


class PipeBuilder:
    """Grows a chain of pieces from a starting rectangle, one checkpoint at a time."""

    def __init__(self, rect: Rect2D, speed: float, label: str = ""):
        self.rect, self.speed, self.label = rect, speed, label
        self.pieces: list = []

    def _push(self, p: Piece) -> "PipeBuilder":
        if not p.source.same_as(self.rect, 1e-9):
            raise GeometryError(f"{self.label}: piece source {p.source} misses {self.rect}")
        self.pieces.append(p)
        self.rect, self.speed = p.sink, p.speed_sink
        return self

    def span(self, axis: int) -> tuple:
        return self.rect.spans[self.rect.others.index(axis)]

    def _with(self, offset: float, changes: dict) -> Rect2D:
        spans = list(self.rect.spans)
        for ax, s in changes.items():
            spans[self.rect.others.index(ax)] = tuple(s)
        return Rect2D(self.rect.axis, offset, tuple(spans), self.rect.sign)

    def run(self, offset: float, shift: Optional[dict] = None) -> "PipeBuilder":
        """Straight (possibly sheared) run to the plane at ``offset``; ``shift`` maps axis to new lo."""
        ch = {}
        for ax, lo in (shift or {}).items():
            a, b = self.span(ax)
            ch[ax] = (lo, lo + b - a)
        return self._push(parallel_field(self.rect, self._with(offset, ch), self.speed, self.label))

    def resize(self, offset: float, axis: int, span: tuple) -> "PipeBuilder":
        """Change the width on ``axis``; one wall of the new span must match the old one."""
        a, b = self.span(axis)
        if abs(a - span[0]) < 1e-15 and abs(b - span[1]) < 1e-15:
            return self.run(offset)
        span = (a, span[1]) if abs(a - span[0]) <= 1e-12 else (span[0], b) if abs(b - span[1]) <= 1e-12 else span
        return self._push(pipe_width_field(self.rect, self._with(offset, {axis: span}), self.speed, self.label))

    def turn(self, axis: int, sign: int, L: float, spread_sign: int = 1) -> "PipeBuilder":
        """Quarter turn toward sign*e_axis with radius parameter L."""
        r = self.rect
        t = 3 - axis - r.axis
        (nlo, nhi), (tlo, thi) = self.span(axis), self.span(t)
        b = np.zeros(3)
        b[r.axis] = r.offset
        b[axis] = nlo if sign > 0 else nhi
        b[t] = tlo if spread_sign > 0 else thi
        iso = Isometry.make([_unit(axis, sign), _unit(t, spread_sign), _unit(r.axis, r.sign)], b)
        return self._push(Corner(nhi - nlo, thi - tlo, L, self.speed, iso, self.label))

    @property
    def flow_axis(self) -> int:
        return self.rect.axis

    def position_along(self) -> float:
        return self.rect.offset


# ---------------------------------------------------------------- interchanges

def _inverse(iso: Isometry) -> Isometry:
    return Isometry(iso.A.T.copy(), -iso.A.T @ iso.b)


def _box_frame(rlo, rhi, xdir: tuple, ydir: tuple) -> Isometry:
    """Frame with the box's horizontal square at [0, l]^2 and local axes along xdir, ydir."""
    cols = [_unit(*xdir), _unit(*ydir), _unit(2)]
    b = np.zeros(3)
    for ax, s in (xdir, ydir):
        b[ax] = rlo[ax] if s > 0 else rhi[ax]
    return Isometry.make(cols, b)


def _route_straight(l, pipes, gap):
    out = []
    multi = len(pipes) > 1
    for rin, rout, speed, label in pipes:
        h, h2 = rin.spans[0][0], rout.spans[0][0]
        w2 = rout.spans[0][1] - h2
        m = h + h2 - l / 2 if multi else h
        b = PipeBuilder(rin, speed, label)
        b.run(l / 3, {0: m})
        b.resize(2 * l / 3, 0, (m, m + w2))
        b.run(l, {0: h2})
        out.append(b)
    return out


def _route_corner(l, pipes, gap):
    """Right turn: enter on y' = 0 moving +y', leave on x' = l moving +x'."""
    pipes = sorted(pipes, key=lambda p: p[0].spans[0][0])
    p_lo, pos = [], l / 16
    for rin, rout, _, _ in pipes:
        w, w2 = rin.spans[0][1] - rin.spans[0][0], rout.spans[0][1] - rout.spans[0][0]
        p_lo.append(pos)
        pos += max(w, w2) + gap
    Xs = max(p + 2 * (r[1].spans[0][1] - r[1].spans[0][0]) for p, r in zip(p_lo, pipes)) + gap
    Y1, Y2 = l / 8, l / 4
    out = []
    for p, (rin, rout, speed, label) in zip(p_lo, pipes):
        g, g2 = rout.spans[0]
        b = PipeBuilder(rin, speed, label)
        b.run(Y1, {0: p})
        b.resize(Y2, 0, (p, p + g2 - g))
        b.turn(0, 1, Xs - p)
        b.run(l, {1: g})
        out.append(b)
    if Y2 + Xs - p_lo[0] > l:
        raise GeometryError("corner interchange does not fit its box")
    return out


def _route_uturn(l, pipes, wc):
    """Single pipe entering on y' = 0 and leaving through the same face at larger x'."""
    (rin, rout, speed, label), = pipes
    h = rin.spans[0][0]
    g, g2 = rout.spans[0]
    if g - wc < h + 2 * wc + 1e-15:
        raise GeometryError("u-turn interchange: entry and exit slots too close")
    b = PipeBuilder(rin, speed, label)
    b.resize(l / 8, 0, (h, h + wc))
    b.turn(0, 1, 2 * wc)
    b.run(g - wc)
    b.turn(1, -1, 2 * wc)
    b.resize(0.0, 0, (g, g2))
    return [b]


def route_box(rlo, rhi, pipes, lay: Layout) -> list:
    """Route pipes (entry rect, exit rect, speed, label) through one box; all share faces.

    Returns one chain of pieces per pipe in the order given.
    """
    e_ax, e_s = pipes[0][0].axis, pipes[0][0].sign
    x_ax, x_s = pipes[0][1].axis, pipes[0][1].sign
    if any((p[0].axis, p[0].sign, p[1].axis, p[1].sign) != (e_ax, e_s, x_ax, x_s) for p in pipes):
        raise GeometryError("pipes of one interchange must share entry and exit faces")
    perp = 1 - e_ax
    if x_ax == e_ax and x_s == e_s:
        kind, xdir = "straight", (perp, 1)
    elif x_ax == e_ax:
        kind = "uturn"
        # spans[0] is the horizontal transverse axis of both rects
        xdir = (perp, 1 if pipes[0][1].spans[0][0] > pipes[0][0].spans[0][0] else -1)
    else:
        kind, xdir = "corner", (x_ax, x_s)
    D = _box_frame(rlo, rhi, xdir, (e_ax, e_s))
    Di = _inverse(D)
    local = [(a.transformed(Di), b.transformed(Di), s, lab) for a, b, s, lab in pipes]
    l = lay.l
    gap = l / (32 * lay.K)
    if kind == "straight":
        built = _route_straight(l, local, gap)
    elif kind == "corner":
        built = _route_corner(l, local, gap)
    else:
        built = _route_uturn(l, local, lay.eps)
    by_label = {}
    for b, (_, rout, _, lab) in zip(built, [p for p in local] if kind != "corner" else
                                     sorted(local, key=lambda p: p[0].spans[0][0])):
        if not b.rect.same_as(rout, 1e-9):
            raise GeometryError(f"interchange {lab}: ended at {b.rect}, expected {rout}")
        by_label[id(rout)] = [p.placed(D) for p in b.pieces]
    return [by_label[id(r[1])] for r in local]


# ---------------------------------------------------------------- per-cube pieces

def cube_frame(lay: Layout, v, o) -> Isometry:
    """Canonical frame of cube v for subcube offset o."""
    l, h = lay.l, 1.0 / lay.N
    cols, b = [], np.zeros(3)
    for i in range(3):
        refl = o[i] == lay.K - 1
        cols.append(_unit(i, -1 if refl else 1))
        b[i] = h * v[i] + l * o[i] + (l if refl else 0.0)
    return Isometry.make(cols, b)


def snake_field(lay: Layout, frame: Isometry, label: str = "") -> CubeFlow:
    """Snake plus gate cell of one subcube; source G_in, sink G_out."""
    return CubeFlow(lay.l, lay.kappa, lay.mu0, frame, label)


def gate_field(lay: Layout, frame: Isometry) -> tuple:
    """(G_in, G_out) of the subcube in global coordinates."""
    c = snake_field(lay, frame)
    return c.source, c.sink


def _rbox(lay: Layout, frame: Isometry) -> tuple:
    l = lay.l
    cs = frame.to_global(np.array([[a, b, l] for a in (0, l) for b in (0, l)]))
    return cs.min(axis=0), cs.max(axis=0)


def _zspan(lay: Layout, frame: Isometry, k: int) -> tuple:
    lo, hi = lay.level_span(k)
    z = sorted(frame.to_global(np.array([[0, 0, lo], [0, 0, hi]]))[:, 2])
    return (float(z[0]), float(z[1]))


# reservoir geometry in canonical units of l
_RES_IN, _RES_OUT, _RES_TOP = 0.05, 0.05, 1.85
_RES_HMAX = 0.94


def reservoir_field(lay: Layout, tau: float, label: str = "reservoir") -> list:
    """Widened pipe from G_out whose transit is exactly ``tau`` (canonical frame).

    The width H on the x axis is found by bisection; transit is increasing in H.
    """
    l, eps = lay.l, lay.eps
    y0 = l / 2 + eps
    ya, yb, yc = y0 + _RES_IN * l, l * _RES_TOP - _RES_OUT * l, l * _RES_TOP
    g_out = Rect2D(1, y0, ((l, l + eps), (0.0, l)), 1)

    def build(H):
        b = PipeBuilder(g_out, lay.mu0, label)
        b.resize(ya, 0, (l, l + H)).run(yb).resize(yc, 0, (l, l + eps))
        return b.pieces

    def t(H):
        return sum(p.transit for p in build(H))

    lo, hi = eps * (1 + 1e-9), _RES_HMAX * l
    if not t(lo) <= tau <= t(hi):
        raise GeometryError(f"reservoir time {tau!r} outside [{t(lo)!r}, {t(hi)!r}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t(mid) < tau:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * l:
            break
    H = 0.5 * (lo + hi)
    pieces = build(H)
    if abs(sum(p.transit for p in pieces) - tau) > 1e-12:
        raise GeometryError("reservoir bisection did not converge")
    for p in pieces:
        p.reservoir_height = H
    return pieces


def _entrance_tail(lay: Layout) -> PipeBuilder:
    """Canonical pipe from the reservoir outlet to the top face of the network box."""
    l, eps, eta = lay.l, lay.eps, lay.eta
    z13 = lay.level_span(13)[0]
    start = Rect2D(1, l * _RES_TOP, ((l, l + eps), (0.0, l)), 1)
    b = PipeBuilder(start, lay.mu0, "entrance")
    b.resize(l * (_RES_TOP + 0.02), 2, (l - eta, l))
    b.turn(2, 1, 2 * eta)
    b.run(z13 - eta)
    b.turn(1, -1, 2 * eta)
    b.run(l, {0: 0.75 * l})
    return b


def _exit_head(lay: Layout) -> PipeBuilder:
    """Canonical pipe from the right face of the network box down to G_in."""
    l, eps, eta = lay.l, lay.eps, lay.eta
    z14 = lay.level_span(14)
    start = Rect2D(0, l, ((0.15 * l, 0.15 * l + eps), z14), 1)
    b = PipeBuilder(start, lay.flux / (eps * eta), "exit")
    b.run(1.05 * l)
    b.turn(1, -1, 2 * eps)
    ys = b.rect.offset - 0.01 * l
    b.run(ys)
    b.turn(2, -1, 2 * eta)
    b.run(l + eta)
    b.turn(1, 1, 2 * eta)
    b.run(b.rect.offset + 0.1 * l, {0: l})
    b.resize(l / 2 - eps, 2, (0.0, l))
    return b


def entrance_field(lay: Layout, frame: Isometry, tau_rest: float) -> tuple:
    """(pieces, reservoir height): G_out to the network box, transit 1/4 - tau_rest."""
    tail = _entrance_tail(lay)
    res = reservoir_field(lay, 0.25 - tau_rest - sum(p.transit for p in tail.pieces))
    return [p.placed(frame) for p in res + tail.pieces], res[0].reservoir_height


def exit_field(lay: Layout, frame: Isometry) -> list:
    return [p.placed(frame) for p in _exit_head(lay).pieces]


# ---------------------------------------------------------------- rounds

def lift_planar(sigma2: Permutation, layers: Optional[int] = None) -> Permutation:
    """Planar permutation of an n x n grid repeated on every layer of the n^3 grid."""
    if sigma2.graph.nu != 2:
        raise ValueError("lift_planar needs a permutation of a planar grid")
    n = sigma2.graph.n
    g3 = GridGraph(3, n)
    return Permutation.from_function(g3, lambda v: (*sigma2((v[0], v[1])), v[2]))


def check_scope(sigma: Permutation) -> None:
    if sigma.graph.nu != 3:
        raise ScopeError("the realizer works on the three-dimensional grid")
    if not sigma.fixes_trailing_coords():
        raise ScopeError("general 3D permutations are out of scope: only permutations "
                         "that keep the third coordinate fixed can be realized")


def highway_rects(lay: Layout, sol: FlowSolution, frames: dict) -> dict:
    """(A_in, A_out, speed) for every (path, edge position)."""
    fam, g = sol.family, sol.family.graph
    l, eta = lay.l, lay.eta
    scale = l / (4 * lay.K)
    heights = {}
    for eid, gs in fam.edge_index.items():
        order = sorted(gs, key=functools.cmp_to_key(lambda a, b: edge_order_compare(g, eid, a, b, fam)))
        acc = 3 * l / 8
        for gi in order:
            w = float(sol.thickness.lookup(eid, gi)) * scale
            heights[(gi, eid)] = (acc, w)
            acc += w
        if acc - 3 * l / 8 > l / (4 * lay.K) * (1 + 1e-12):
            raise GeometryError(f"capacity overflow on edge {g.edge_endpoints(eid)}")
    out = {}
    for gi, path in enumerate(fam.paths):
        verts = [g.vertex(i) for i in path]
        for k, eid in enumerate(fam.edges[gi]):
            a, b = verts[k], verts[k + 1]
            ax, s = _offset(a, b)
            tb = 1 - ax
            la, lb = level_of(verts, a) if k else 13, level_of(verts, b)
            ra_lo, ra_hi = _rbox(lay, frames[a])
            rb_lo, rb_hi = _rbox(lay, frames[b])
            h, w = heights[(gi, eid)]
            tspan = (ra_lo[tb] + h, ra_lo[tb] + h + w)
            src = Rect2D(ax, float(ra_hi[ax] if s > 0 else ra_lo[ax]),
                         (tspan, _zspan(lay, frames[a], la)), s)
            snk = Rect2D(ax, float(rb_lo[ax] if s > 0 else rb_hi[ax]),
                         (tspan, _zspan(lay, frames[b], lb)), s)
            out[(gi, k)] = (src, snk, lay.flux / (w * eta))
    return out


def highway_edge_field(lay: Layout, rects: dict, gi: int, k: int) -> Piece:
    src, snk, speed = rects[(gi, k)]
    return parallel_field(src, snk, speed, f"highway:{gi}:{k}")


def interchange_field(lay: Layout, frame: Isometry, pipes: list) -> list:
    """Chains through the network box of one vertex for pipes sharing a level."""
    lo, hi = _rbox(lay, frame)
    return route_box(lo, hi, pipes, lay)


@dataclass
class RoundField:
    layout: Layout
    offset: tuple
    forward: PiecewiseField
    reverse: PiecewiseField
    legs: dict
    cubes: dict
    frames: dict
    reservoir_height: dict
    sigma: Permutation
    audits: dict = field(default_factory=dict)

    def time_one_map(self, x) -> np.ndarray:
        return time_one_map(self, x)


def assemble_round(sigma: Permutation, lay: Layout, offset=(0, 0, 0), sol: Optional[FlowSolution] = None,
                   audit: bool = True) -> RoundField:
    """Forward and reverse fields of one round for subcube offset ``offset``."""
    check_scope(sigma)
    g = sigma.graph
    if g.n != lay.N:
        raise ValueError("layout N differs from the grid size")
    o = tuple(int(x) for x in offset)
    if any(not 0 <= x < lay.K for x in o):
        raise ValueError(f"subcube offset {o} outside 0..{lay.K - 1}")
    sol = sol or solve_single_path(sigma)
    fam = sol.family
    frames = {v: cube_frame(lay, v, o) for v in g.vertices()}
    rects = highway_rects(lay, sol, frames)

    # interchanges grouped by (vertex, level)
    groups: dict = {}
    paths = {gi: [g.vertex(i) for i in p] for gi, p in enumerate(fam.paths)}
    for gi, verts in paths.items():
        for k in range(1, len(verts) - 1):
            key = (verts[k], level_of(verts, verts[k]))
            groups.setdefault(key, []).append((rects[(gi, k - 1)][1], rects[(gi, k)][0],
                                               rects[(gi, k - 1)][2], (gi, k)))
    inter = {}
    for (v, _), pipes in groups.items():
        for chain, (_, _, _, key) in zip(interchange_field(lay, frames[v], pipes), pipes):
            inter[key] = chain

    legs, cubes, hres = {}, {}, {}
    ent_end = _entrance_tail(lay).rect
    ex_start = _exit_head(lay).pieces[0].source
    for gi, verts in paths.items():
        if len(verts) < 2:
            continue
        v, w = verts[0], verts[-1]
        fv, fw = frames[v], frames[w]
        (r13,) = interchange_field(lay, fv, [(ent_end.transformed(fv), rects[(gi, 0)][0],
                                              lay.flux / (lay.eps * lay.eta), "start")])
        last = len(verts) - 2
        (r14,) = interchange_field(lay, fw, [(rects[(gi, last)][1], ex_start.transformed(fw),
                                              rects[(gi, last)][2], "end")])
        mid = []
        for k in range(len(verts) - 1):
            mid.append(highway_edge_field(lay, rects, gi, k))
            if k < last:
                mid.extend(inter[(gi, k + 1)])
        ex = exit_field(lay, fw)
        rest = r13 + mid + r14 + ex
        ent, H = entrance_field(lay, fv, sum(p.transit for p in rest))
        legs[v] = Chain(ent + rest, f"leg:{v}")
        hres[v] = H
        cubes[v] = snake_field(lay, fv, f"cube:{v}")

    fwd = PiecewiseField(list(cubes.values()) + [p for c in legs.values() for p in c.pieces], (0.0, 0.5))
    rev_pieces = reverse_fields(lay, cubes, legs)
    rev = PiecewiseField(rev_pieces, (0.5, 1.0))
    rf = RoundField(lay, o, fwd, rev, legs, cubes, frames, hres, sigma)
    rf.audits["leg_transit_max_error"] = max((abs(ch.transit - 0.25) for ch in legs.values()), default=0.0)
    rf.audits["flux"] = fwd.flux_report()
    rf.audits["reverse_flux"] = rev.flux_report()
    if audit:
        bad = fwd.overlaps(1e-9, 10)
        rf.audits["overlaps"] = [list(map(float, b)) for b in bad]
    return rf


def reverse_fields(lay: Layout, cubes: dict, legs: dict) -> list:
    """Second-half pieces: every leg run backwards plus a straight gate shortcut.

    The unscaled reverse trip from a gate back to itself takes 1/4 + lam/mu0;
    all speeds are multiplied by 2 (1/4 + lam/mu0) so it fits the half round.
    """
    c = 2 * (0.25 + lay.lam / lay.mu0)
    out = [gate_shortcut(cubes[v], lay.mu0 * c, f"shortcut:{v}") for v in cubes]
    for chain in legs.values():
        out += [TimeScaled(Reversed(p), c) for p in chain.pieces]
    return out


def time_one_map(rf: RoundField, x) -> np.ndarray:
    """Forward half then reverse half of one round."""
    y = rf.forward.flow(x, 0.5)
    return rf.reverse.flow(y, 0.5)


def round_offsets(K: int) -> list:
    return list(itertools.product(range(K), repeat=3))


@dataclass
class Schedule:
    """K^3 rounds in lexicographic order of the subcube offset; each lasts 1/K^3."""

    layout: Layout
    sigma: Permutation
    rounds: list

    def time_one_map(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        for rf in self.rounds:
            x = time_one_map(rf, x)
        return x


def schedule_rounds(sigma: Permutation, lay: Layout, audit: bool = True) -> Schedule:
    sol = solve_single_path(sigma)
    return Schedule(lay, sigma, [assemble_round(sigma, lay, o, sol, audit) for o in round_offsets(lay.K)])


def psi(sigma: Permutation, x) -> np.ndarray:
    """The cube permutation itself: rigid translation of every grid cube."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = sigma.graph.n
    v = np.clip(np.floor(x * n).astype(int), 0, n - 1)
    out = x.copy()
    for k, row in enumerate(v):
        w = sigma(tuple(row))
        out[k] += (np.array(w) - row) / n
    return out


def psi_minus_id_norm(sigma: Permutation, p) -> float:
    """||psi_sigma - Id||_{L^p(M)} with the Euclidean norm of the displacement."""
    g = sigma.graph
    n = g.n
    d = [math.dist(v, sigma(v)) / n for v in g.vertices()]
    if p == math.inf or p == "inf":
        return max(d, default=0.0)
    p = float(p)
    return (sum(x ** p for x in d) / n ** g.nu) ** (1 / p)


def discrete_aggregate(sol: FlowSolution, p) -> float:
    """N^(-3/p - 1) (sum over path edges of rho^(1-p))^(1/p)."""
    n = sol.family.graph.n
    rhos = [float(r) for _, _, r in sol.thickness.items()]
    if p == math.inf or p == "inf":
        return max((1 / r for r in rhos), default=0.0) / n
    p = float(p)
    return n ** (-3 / p - 1) * sum(r ** (1 - p) for r in rhos) ** (1 / p)


def norm_report(rf: RoundField, sigma: Permutation, p=2, q=1, samples: int = 10 ** 5, seed: int = 0) -> dict:
    """L^q_t L^p_x size of one round (forward half then reverse half) against ||psi - Id||_p.

    Each round is the same field up to reflections, so time compression by
    K^3 and the count of K^3 rounds cancel for q = 1; the reported value is
    that of a single round run over unit time.
    """
    fwd = lp_norm(rf.forward.pieces, p, samples, seed)
    rev = lp_norm(rf.reverse.pieces, p, samples, seed + 1)
    qq = float(q)
    agg = {}
    for k in ("bound", "mc"):
        a, b = fwd[k], rev[k]
        agg[k] = (0.5 * a ** qq + 0.5 * b ** qq) ** (1 / qq)
    # delta method through the two halves
    u = agg["mc"]
    da = 0.5 * fwd["mc"] ** (qq - 1) * u ** (1 - qq) if u > 0 else 0.0
    db = 0.5 * rev["mc"] ** (qq - 1) * u ** (1 - qq) if u > 0 else 0.0
    agg["mc_stderr"] = math.hypot(da * fwd["mc_stderr"], db * rev["mc_stderr"])
    target = psi_minus_id_norm(sigma, p)
    sol = solve_single_path(sigma)
    disc = discrete_aggregate(sol, p)
    ratio = (lambda a, b: a / b if b > 0 else 0.0)
    return {
        "p": p if p != math.inf else "inf", "q": q,
        "u_Lp": agg, "forward": fwd, "reverse": rev,
        "psi_minus_id_Lp": target, "discrete_aggregate": disc,
        "ratio": {"u_over_psi": ratio(agg["mc"], target), "u_over_psi_stderr": ratio(agg["mc_stderr"], target),
                  "u_bound_over_psi": ratio(agg["bound"], target),
                  "u_over_discrete": ratio(agg["mc"], disc), "discrete_over_psi": ratio(disc, target)},
    }


def order_preservation(rf: RoundField, n_pairs: int = 1000, seed: int = 0) -> dict:
    """Checkpoint maps keep the x3 order of points sharing the other source coordinates' pattern.

    Pairs on the same source rectangle are pushed through each leg and the
    sign of their x3 difference is compared at the end (the leg map is a
    translation, so every pair must keep its order).
    """
    rng = np.random.default_rng(seed)
    bad = total = 0
    for chain in rf.legs.values():
        a = chain.source.sample(rng, n_pairs // max(1, len(rf.legs)) + 1, 1e-9)
        b = chain.source.sample(rng, len(a), 1e-9)
        ya, yb = chain.sink_map(a), chain.sink_map(b)
        bad += int(np.sum(np.sign(a[:, 2] - b[:, 2]) != np.sign(ya[:, 2] - yb[:, 2])))
        total += len(a)
    return {"pairs": total, "violations": bad}


def sample_subcube(rf: RoundField, n: int, seed: int = 0) -> tuple:
    """(points, expected images) with n points in each moving subcube, nudged off the boundary."""
    rng = np.random.default_rng(seed)
    l = rf.layout.l
    xs, ys = [], []
    for v in rf.cubes:
        x = rf.frames[v].to_global(rng.uniform(1e-12, l - 1e-12, (n, 3)))
        xs.append(x)
        ys.append(x + (np.array(rf.sigma(v)) - np.array(v)) / rf.layout.N)
    if not xs:
        return np.empty((0, 3)), np.empty((0, 3))
    return np.vstack(xs), np.vstack(ys)


def sample_pipes(rf: RoundField, n: int, seed: int = 0) -> np.ndarray:
    """About n points spread over the leg pieces and gate boxes of the round."""
    rng = np.random.default_rng(seed)
    pieces = [p for ch in rf.legs.values() for p in ch.pieces]
    if not pieces:
        return np.empty((0, 3))
    per = max(1, n // (2 * len(pieces)) + 1)
    pts = []
    for p in pieces:
        z = p.source.sample(rng, per, 1e-6)
        pts.append(p.position(z, rng.uniform(1e-6, 1 - 1e-6, per) * p.transit))
    l, e = rf.layout.l, rf.layout.eps
    per_g = max(1, n // (2 * len(rf.cubes)) + 1)
    for v in rf.cubes:
        u = rng.uniform(1e-9, 1 - 1e-9, (per_g, 3))
        pts.append(rf.frames[v].to_global(np.c_[l + e * u[:, 0], l / 2 - e + 2 * e * u[:, 1], l * u[:, 2]]))
    return np.vstack(pts)


def trajectory(rf: RoundField, x0, steps: int = 200) -> list:
    """Rows (t, x, y, z, piece_id) of one point sampled on a uniform time grid."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    rows = []
    for k in range(steps + 1):
        t = k / steps
        if t <= 0.5:
            y = rf.forward.flow(x0, t)
            pid = int(rf.forward.which(y)[0])
        else:
            y = rf.reverse.flow(rf.forward.flow(x0, 0.5), t - 0.5)
            pid = int(rf.reverse.which(y)[0])
        rows.append((t, float(y[0, 0]), float(y[0, 1]), float(y[0, 2]), pid))
    return rows


def realize(sigma: Permutation, K: int, kappa: int, mode: str = "relaxed", samples: int = 1000,
            seed: int = 0, p=2, q=1, offset=(0, 0, 0)) -> dict:
    """Build one round, audit it and sample its time-one map; returns the report dict."""
    timings = {}
    t0 = time.perf_counter()
    lay = derive_layout(sigma.graph.n, K, kappa, mode)
    check_scope(sigma)
    rf = assemble_round(sigma, lay, offset)
    timings["assemble"] = time.perf_counter() - t0
    audits = dict(rf.audits)
    audits["order"] = order_preservation(rf, seed=seed)
    map_err = rt_err = 0.0
    if samples > 0:
        t1 = time.perf_counter()
        x, want = sample_subcube(rf, samples, seed)
        if len(x):
            map_err = float(np.abs(time_one_map(rf, x) - want).max())
        y = sample_pipes(rf, samples, seed + 1)
        if len(y):
            rt_err = float(np.abs(time_one_map(rf, y) - y).max())
        timings["sampling"] = time.perf_counter() - t1
    t2 = time.perf_counter()
    norms = norm_report(rf, sigma, p, q, samples=max(samples, 1) * 100, seed=seed)
    timings["norms"] = time.perf_counter() - t2
    ok = (not audits.get("overlaps") and audits["flux"]["max_rel_flux_mismatch"] <= 1e-12
          and audits["leg_transit_max_error"] <= 1e-12 and audits["order"]["violations"] == 0
          and map_err <= 1e-9 and rt_err <= 1e-9)
    return {
        "seed": seed,
        "layout": lay.to_dict(),
        "constraint_flags": lay.flags,
        "offset": list(rf.offset),
        "moving_cubes": len(rf.cubes),
        "pieces": {"forward": len(rf.forward.pieces), "reverse": len(rf.reverse.pieces)},
        "audits": audits,
        "map_error_max": map_err,
        "roundtrip_error_max": rt_err,
        "norms": {"u_Lp": norms["u_Lp"], "psi_minus_id_Lp": norms["psi_minus_id_Lp"],
                  "discrete_aggregate": norms["discrete_aggregate"], "ratio": norms["ratio"],
                  "p": norms["p"], "q": norms["q"]},
        "ok": bool(ok),
        "timings": timings,
        "_round": rf,
    }
