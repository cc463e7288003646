"""Acceptance criteria, one test each; every test prints a PASS or FAIL line."""
import math
import time
from collections import Counter
from fractions import Fraction

import mpmath
import numpy as np

from gridflow.continuum import (CubeFlow, Rect2D, corner_field, divergence_audit, gate_shortcut,
                                lambert_w_array, parallel_field, pipe_width_field, rotation_field,
                                trace_rk4)
from gridflow.discrete_flow import (cost_power_sum, cost_sup, is_admissible, lower_bound)
from gridflow.grid import INF, GridGraph, Permutation, displacement_norm, displacement_power_sum
from gridflow.oracle import ConvexInnerProblem, exact_cost_float, optimize_thickness
from gridflow.realizer import (assemble_round, derive_layout, norm_report, sample_pipes,
                               sample_subcube, time_one_map)
from gridflow.solvers import (counterexample_census, counterexample_permutation, predict_usage_1d_all,
                              predict_usage_2d, solve, solve_1d, solve_2d, solve_multi)


def scan_usage(family):
    """Weighted usage of every edge by one direct pass over the stored paths."""
    acc = Counter()
    for g, es in enumerate(family.edges):
        for e in set(es):
            acc[e] += family.weight[g]
    return acc


def test_c01_one_dimensional_bound(criterion):
    t0 = time.perf_counter()
    runs, bad = 0, []
    for n in (8, 16, 32, 64, 128, 256):
        for seed in range(200):
            s = Permutation.random(GridGraph(1, n), seed)
            sol = solve_1d(s)
            runs += 1
            if not is_admissible(sol) or not cost_sup(sol) <= 3 * displacement_norm(s, INF):
                bad.append((n, seed))
    dt = time.perf_counter() - t0
    criterion(1, not bad and dt < 30,
              f"{runs} permutations, admissible with c_inf <= 3 |dist|_inf: {runs - len(bad)}/{runs}, {dt:.1f} s")


def test_c02_closed_form_usage(criterion):
    t0 = time.perf_counter()
    edges = mism = 0
    sizes = (2, 4, 8, 16, 32)
    for nu in (1, 2):
        for k in range(200):
            n = sizes[k % len(sizes)]
            s = Permutation.random(GridGraph(nu, n), 1000 * nu + k)
            sol = solve(s)
            g = s.graph
            brute = scan_usage(sol.family)
            pred = predict_usage_1d_all(s) if nu == 1 else None
            for eid in g.edge_ids():
                a, b = g.edge_endpoints(eid)
                got = pred[a[0]] if nu == 1 else predict_usage_2d(s, (a, b))
                edges += 1
                mism += Fraction(got) != brute.get(eid, 0)
    dt = time.perf_counter() - t0
    criterion(2, mism == 0 and dt < 60, f"{edges} edges over 400 permutations, {mism} mismatches, {dt:.1f} s")


def test_c03_l1_identity(criterion):
    t0 = time.perf_counter()
    cases = bad = 0
    for nu, sizes in ((1, (4, 16, 64)), (2, (3, 8, 16)), (3, (2, 4, 8))):
        for n in sizes:
            for seed in range(10):
                s = Permutation.random(GridGraph(nu, n), seed)
                sol = solve(s)
                cases += 1
                bad += sum(sol.usage_map().values(), Fraction(0)) != displacement_norm(s, 1)
    dt = time.perf_counter() - t0
    criterion(3, bad == 0 and dt < 60, f"|F|_l1 == |dist|_l1 on {cases - bad}/{cases} solutions, {dt:.1f} s")


def test_c04_multi_d_constant(criterion):
    t0 = time.perf_counter()
    checks = bad = 0
    worst = 0.0
    for n in (4, 8, 16):
        for seed in range(50):
            s = Permutation.random(GridGraph(3, n), seed)
            sol = solve_multi(s)
            for p in (1, 2, 3):
                c, d = cost_power_sum(sol, p), displacement_power_sum(s, p)
                checks += 1
                bad += not c <= 25 ** p * d
                if d:
                    worst = max(worst, (float(c) / d) ** (1 / p))
            c, d = cost_sup(sol), displacement_norm(s, INF)
            checks += 1
            bad += not c <= 25 * d
            if d:
                worst = max(worst, float(c) / float(d))
    dt = time.perf_counter() - t0
    criterion(4, bad == 0 and dt < 300,
              f"c_p <= 25 |dist|_p in {checks - bad}/{checks} checks (largest ratio {worst:.3f}), {dt:.1f} s")


def test_c05_sandwich(criterion):
    t0 = time.perf_counter()
    bad, rows = 0, 0
    for k in range(20):
        nu, n = ((1, 8), (2, 4), (2, 8), (3, 4))[k % 4]
        p = (1, 2, 3, INF)[k % 4]
        s = Permutation.random(GridGraph(nu, n), 500 + k)
        sol = solve(s)
        res = optimize_thickness(ConvexInnerProblem(sol.family, p))
        lb = float(lower_bound(s, p))
        std = exact_cost_float(sol, p)
        rows += 1
        bad += not (res.admissible and lb <= res.cost * (1 + 1e-12) and res.cost <= std * (1 + 1e-12))
    dt = time.perf_counter() - t0
    criterion(5, bad == 0 and dt < 300, f"lower <= optimized <= standard on {rows - bad}/{rows} instances, {dt:.1f} s")


def test_c06_counterexample_scaling(criterion):
    t0 = time.perf_counter()
    parts, literal_ok, rest_ok = [], True, True
    for n in (4, 8, 16):
        sol = solve(counterexample_permutation(n), single_path=True)
        census = counterexample_census(sol, n * n)
        fam = sol.family
        cert = max(scan_usage(fam).values())
        dist = displacement_norm(fam.sigma, INF)
        literal_ok &= census >= Fraction(n * n, 2)
        rest_ok &= cert >= n * n and dist <= 3 * (n - 1)
        parts.append(f"N={n}: #F>=N^2 is {census} vs {n * n // 2}, sup {cert}, dist {dist}")
    dt = time.perf_counter() - t0
    criterion(6, literal_ok and rest_ok and dt < 60, "; ".join(parts) + f", {dt:.1f} s")


def _kinds():
    A2 = Rect2D(2, 0.0, ((0.0, 2.0), (0.0, 1.0)))
    cube = CubeFlow(1.0, 4, 10.0)
    return [
        ("constant", parallel_field(Rect2D(2, 0.0, ((0, 1), (0, 1))), Rect2D(2, 1.0, ((0.5, 1.5), (0, 1))), 2.0)),
        ("pipe_width", pipe_width_field(A2, Rect2D(2, 1.0, ((0.0, 1.0), (0.0, 1.0))), 1.0)),
        ("corner_half", corner_field(0.5, 1.0, 1.0, 4.0)),
        ("rotation", rotation_field(Rect2D(2, 0.0, ((-1.0, 1.0), (-1.0, 1.0))), 1.0)),
        ("snake_cell", cube),
        ("gate_cell", gate_shortcut(cube, 10.0)),
    ]


def test_c07_continuum_primitives(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    notes, ok = [], True
    for name, pc in _kinds():
        rep = divergence_audit(pc)
        z = pc.source.sample(rng, 10, 1e-6)
        err = float(np.abs(trace_rk4(pc, z) - pc.sink_map(z)).max())
        good = rep["interior_ok"] and rep["flux_ok"] and err <= 1e-6
        ok &= good
        notes.append(f"{name} rk4 {err:.1e}")
    par = _kinds()[0][1]
    pipe = _kinds()[1][1]
    cor = _kinds()[2][1]
    times = (par.transit == par.D3 / par.mu and cor.transit == 2 * cor.L / cor.mu
             and pipe.D3 / max(pipe.muA, pipe.muB) <= pipe.transit <= pipe.D3 / min(pipe.muA, pipe.muB))
    ok &= times
    dt = time.perf_counter() - t0
    criterion(7, ok and dt < 120, ", ".join(notes) + f"; transit times exact: {times}, {dt:.1f} s")


def _bisect60(y):
    # 60 halvings; 200-bit evaluation since doubles cannot resolve w e^w near -1/e
    lo, hi = mpmath.mpf(-1), mpmath.mpf(0)
    y = mpmath.mpf(y)
    for _ in range(60):
        mid = (lo + hi) / 2
        if mid * mpmath.exp(mid) > y:
            hi = mid
        else:
            lo = mid
    return float((lo + hi) / 2)


def test_c08_lambert_w(criterion):
    t0 = time.perf_counter()
    y = -np.logspace(-12, math.log10(1 / math.e - 1e-12), 10 ** 4)
    w = lambert_w_array(y)
    t_eval = time.perf_counter() - t0
    res = float((np.abs(w * np.exp(w) - y) / np.abs(y)).max())
    with mpmath.workprec(200):
        agree = max(abs(_bisect60(v) - u) for v, u in zip(y, w))
    criterion(8, res <= 1e-14 and agree <= 1e-13 and t_eval < 5,
              f"max relative residual {res:.1e}, max bisection gap {agree:.1e}, evaluation {t_eval:.3f} s")


def test_c09_realizer_round(criterion):
    t0 = time.perf_counter()
    sigma = Permutation.random_planar(GridGraph(3, 4), 1)
    lay = derive_layout(4, 2, 64)
    rf = assemble_round(sigma, lay)
    x, want = sample_subcube(rf, 1000, 11)
    map_err = float(np.abs(time_one_map(rf, x) - want).max())
    y = sample_pipes(rf, 2000, 12)
    rt_err = float(np.abs(time_one_map(rf, y) - y).max())
    gate = lay.gate_transit_exact() == Fraction(1, 4) and all(
        abs(c.transit - 0.25) <= 1e-15 for c in rf.cubes.values())
    flux = max(rf.audits["flux"]["max_rel_flux_mismatch"], rf.audits["reverse_flux"]["max_rel_flux_mismatch"])
    dt = time.perf_counter() - t0
    ok = (map_err <= 1e-9 and rt_err <= 1e-9 and gate and not rf.audits["overlaps"]
          and flux <= 1e-12 and len(y) >= 1000 and dt < 600)
    criterion(9, ok, f"{len(rf.cubes)} moving cubes x 1000 samples, map error {map_err:.1e}; "
                     f"{len(y)} pipe/gate samples, round trip {rt_err:.1e}; gate 1/4 {gate}; "
                     f"overlaps {len(rf.audits['overlaps'])}; flux {flux:.1e}; {dt:.1f} s")


def test_c10_norm_stability(criterion):
    t0 = time.perf_counter()
    mc, se, bound = {}, {}, {}
    for n in (4, 8):
        lay = derive_layout(n, 2, 64)
        for seed in range(5):
            sigma = Permutation.random_planar(GridGraph(3, n), seed)
            rf = assemble_round(sigma, lay, audit=False)
            rep = norm_report(rf, sigma, 2, 1, samples=2000, seed=seed)
            mc[n, seed] = rep["ratio"]["u_over_psi"]
            se[n, seed] = rep["ratio"]["u_over_psi_stderr"]
            bound[n, seed] = rep["ratio"]["u_bound_over_psi"]
    spread = max(mc.values()) / min(mc.values())
    # widest spread consistent with three standard errors on every run
    spread_3se = max(mc[k] + 3 * se[k] for k in mc) / min(mc[k] - 3 * se[k] for k in mc)
    spread_b = max(bound.values()) / min(bound.values())
    dt = time.perf_counter() - t0

    def rng(n):
        v = [x for (m, _), x in mc.items() if m == n]
        return f"[{min(v):.1f}, {max(v):.1f}]"

    criterion(10, spread_3se < 2,
              f"|u|/|psi-Id| N=4 {rng(4)}, N=8 {rng(8)}; spread {spread:.2f} "
              f"({spread_3se:.2f} at 3 s.e.); certified-bound ratio spread {spread_b:.2f}; {dt:.0f} s")
