"""Independent ground truth: direct path scans, shortest-path enumeration, and a
numeric optimizer for the inner thickness problem."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .discrete_flow import (FlowSolution, PathFamily, Thickness, check_capacity_constraint,
                            check_time_constraint, cost_power_sum, cost_sup, standard_thickness)
from .grid import INF, PValue


class BudgetExceeded(RuntimeError):
    pass


LISTING_GUARD = 18


def count_paths_brute(family: PathFamily, edge) -> Fraction:
    """Weighted number of stored paths that step across ``edge`` (a pair of vertices)."""
    g = family.graph
    a, b = g.index(edge[0]), g.index(edge[1])
    total = Fraction(0)
    for k, p in enumerate(family.paths):
        for x, y in zip(p, p[1:]):
            if (x == a and y == b) or (x == b and y == a):
                total += family.weight[k]
                break
    return total


def enumerate_all_shortest(v: Sequence[int], w: Sequence[int], listing: bool = False):
    """Number of monotone lattice paths from v to w, and the list if asked for."""
    gaps = [abs(b - a) for a, b in zip(v, w)]
    d = sum(gaps)
    count = math.factorial(d)
    for a in gaps:
        count //= math.factorial(a)
    if not listing:
        return count, None
    if d > LISTING_GUARD:
        raise BudgetExceeded(f"distance {d} exceeds the listing guard {LISTING_GUARD}")
    steps = [1 if b > a else -1 for a, b in zip(v, w)]
    out = []
    cur = list(v)
    path = [tuple(cur)]
    remaining = list(gaps)

    def rec():
        if not any(remaining):
            out.append(list(path))
            return
        for i, r in enumerate(remaining):
            if r:
                remaining[i] -= 1
                cur[i] += steps[i]
                path.append(tuple(cur))
                rec()
                path.pop()
                cur[i] -= steps[i]
                remaining[i] += 1

    rec()
    assert len(out) == count
    return count, out


@dataclass
class ConvexInnerProblem:
    family: PathFamily
    p: PValue
    iterations: int = 500
    step: float = 0.5


@dataclass
class OptimizeResult:
    thickness: Thickness
    cost: float
    trace: list = field(default_factory=list)
    admissible: bool = False
    converged: bool = True
    note: str = ""


PROXY_P_INF = 64


def _float_cost(rho: np.ndarray, w: np.ndarray, p: float) -> float:
    # log-domain evaluation keeps large exponents finite
    logs = np.log(w) + (1.0 - p) * np.log(rho)
    m = logs.max()
    return float(np.exp((m + np.log(np.exp(logs - m).sum())) / p))


def _restore(rho, path_of, edge_of, n_paths, n_edges, w, sweeps=50):
    """Alternating Bregman (multiplicative) projections onto the violated
    time and capacity constraints, finished by one global rescale."""
    for _ in range(sweeps):
        tsum = np.bincount(path_of, weights=rho, minlength=n_paths)
        rho = rho / np.maximum(1.0, tsum)[path_of]
        csum = np.bincount(edge_of, weights=w * rho, minlength=n_edges)
        if csum.max() <= 1.0 + 1e-12:
            break
        rho = rho / np.maximum(1.0, csum)[edge_of]
    tsum = np.bincount(path_of, weights=rho, minlength=n_paths)
    csum = np.bincount(edge_of, weights=w * rho, minlength=n_edges)
    scale = np.maximum(1.0, np.maximum(tsum[path_of], csum[edge_of]))
    return np.minimum(rho / scale / (1.0 + 1e-10), 1.0)


def optimize_thickness(problem: ConvexInnerProblem) -> OptimizeResult:
    """Improve the standard thickness by multiplicative steps plus rescaling onto
    both constraint sets, then round to rationals and recheck exactly.

    Each step multiplies rho by exp(eta * u) with u the normalized gradient
    magnitude in log coordinates, then projects back onto both constraint
    families.  Steps that do not lower the objective are rejected and eta is
    halved, so the trace never increases.
    """
    fam = problem.family
    std = standard_thickness(fam)
    pe = PROXY_P_INF if problem.p is INF else float(problem.p)
    path_of, edge_list, wts, rho0 = [], [], [], []
    for g, es in enumerate(fam.edges):
        for k, e in enumerate(es):
            path_of.append(g)
            edge_list.append(e)
            wts.append(float(fam.weight[g]))
            rho0.append(std.Q / std.r[g][k])
    if not path_of:
        return OptimizeResult(std, 0.0, [0.0], True)
    path_of = np.array(path_of)
    uniq, edge_of = np.unique(np.array(edge_list), return_inverse=True)
    w = np.array(wts)
    rho = np.array(rho0)
    n_paths, n_edges = len(fam), len(uniq)
    best = _float_cost(rho, w, pe)
    trace = [best]
    eta = problem.step
    for _ in range(problem.iterations):
        # rho * |gradient| = w * rho^(1-p), scaled to at most one
        logs = np.log(w) + (1.0 - pe) * np.log(rho)
        u = np.exp(logs - logs.max())
        cand = rho * np.exp(eta * u)
        cand = _restore(cand, path_of, edge_of, n_paths, n_edges, w)
        c = _float_cost(cand, w, pe)
        if c < best:
            rho, best = cand, c
            eta = min(eta * 1.25, 4.0)
        else:
            eta *= 0.5
            if eta < 1e-12:
                break
        trace.append(best)
    # feasibility slack before rounding
    rho = rho * (1 - 1e-9)
    tsum = np.bincount(path_of, weights=rho, minlength=n_paths)
    csum = np.bincount(edge_of, weights=w * rho, minlength=n_edges)
    converged = bool(tsum.max() <= 1 + 1e-8 and csum.max() <= 1 + 1e-8)
    Q = 10 ** 12
    rows = []
    pos = 0
    for g, es in enumerate(fam.edges):
        row = []
        for _ in es:
            row.append(max(Q, math.ceil(Q / float(rho[pos]))))
            pos += 1
        rows.append(row)
    th = Thickness(fam, Q, rows)
    sol = FlowSolution(fam, th)
    ok = check_time_constraint(sol).passed and check_capacity_constraint(sol).passed
    result_cost = exact_cost_float(sol, problem.p)
    std_cost = exact_cost_float(FlowSolution(fam, std), problem.p)
    note = ""
    if not ok or result_cost > std_cost:
        note = "fell back to the standard thickness"
        th, result_cost, ok = std, std_cost, True
    return OptimizeResult(th, result_cost, trace, ok, converged, note)


def exact_cost_float(sol: FlowSolution, p: PValue) -> float:
    if p is INF:
        return float(cost_sup(sol))
    if isinstance(p, int):
        s = cost_power_sum(sol, p)
        return math.exp((math.log(s.numerator) - math.log(s.denominator)) / p) if s else 0.0
    from .discrete_flow import cost
    return float(cost(sol, p))
