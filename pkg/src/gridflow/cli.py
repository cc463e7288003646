"""Command line entry point: ``gridflow <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 input error, 3 scope error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import random
import sys
from fractions import Fraction

from .discrete_flow import (check_capacity_constraint, check_time_constraint, cost, frac_str,
                            is_admissible, lower_bound)
from .grid import INF, GridGraph, Permutation, displacement_norm, parse_p
from .oracle import count_paths_brute, enumerate_all_shortest
from .solvers import (certified_sup_lower_bound, counterexample_census, counterexample_permutation,
                      predict_usage_1d, predict_usage_2d, solve)

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_SCOPE = 0, 1, 2, 3


class InputError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("GRIDFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"GRIDFLOW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError("GRIDFLOW_THREADS must be at least 1")
    return n


def _num(x):
    if isinstance(x, Fraction):
        return x.numerator if x.denominator == 1 else frac_str(x)
    if x is INF:
        return "inf"
    return x


def _p_list(text: str) -> list:
    try:
        return [parse_p(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _load_perm(path: str) -> Permutation:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return Permutation.from_json(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=_num) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- subcommands

def cmd_solve_discrete(args) -> int:
    sigma = _load_perm(args.perm)
    ps = _p_list(args.p)
    sol = solve(sigma, single_path=args.single_path)
    tc, cc = check_time_constraint(sol), check_capacity_constraint(sol)
    costs, bounds, ratios = {}, {}, {}
    for p in ps:
        key = "inf" if p is INF else str(p)
        c, b = cost(sol, p), lower_bound(sigma, p)
        costs[key], bounds[key] = _num(c), _num(b)
        ratios[key] = float(c) / float(b) if b else (0.0 if not c else "inf")
    report = {
        "seed": args.seed,
        "nu": sigma.graph.nu, "n": sigma.graph.n,
        "single_path": bool(args.single_path),
        "paths": len(sol.family),
        "admissible": is_admissible(sol),
        "costs": costs, "lower_bounds": bounds, "ratios": ratios,
        "constraints": {"time": tc.as_dict(), "capacity": cc.as_dict(sigma.graph)},
        "certified_sup_lower_bound": _num(certified_sup_lower_bound(sol)),
        "threads": _threads(),
    }
    _emit(report, args.out)
    return EXIT_OK if report["admissible"] else EXIT_FAIL


def _verify_one(sigma: Permutation, errors: list) -> int:
    """Closed forms against brute force for one permutation; returns the number of checks."""
    g = sigma.graph
    sol = solve(sigma)
    checks = 0
    if g.nu in (1, 2):
        for eid in g.edge_ids():
            a, b = g.edge_endpoints(eid)
            want = count_paths_brute(sol.family, (a, b))
            got = predict_usage_1d(sigma, a[0]) if g.nu == 1 else predict_usage_2d(sigma, (a, b))
            checks += 1
            if Fraction(got) != want:
                errors.append(f"usage nu={g.nu} n={g.n} edge {a}-{b}: closed form {got}, brute {want}")
    # l1 identity: total usage equals total displacement
    total = sum(sol.usage_map().values(), Fraction(0))
    checks += 1
    if total != displacement_norm(sigma, 1):
        errors.append(f"l1 identity nu={g.nu} n={g.n}: {total} vs {displacement_norm(sigma, 1)}")
    # sandwich at p = 1 and p = inf
    for p in (1, INF):
        checks += 1
        if not lower_bound(sigma, p) <= cost(sol, p):
            errors.append(f"sandwich p={p}: lower bound exceeds cost")
    checks += 1
    if not is_admissible(sol):
        errors.append(f"constructed solution not admissible nu={g.nu} n={g.n}")
    # path counts: multinomial against explicit listing for one short pair
    v, w = g.vertex(0), g.vertex(sigma.mapping[0])
    if sum(abs(x - y) for x, y in zip(v, w)) <= 10:
        n, listing = enumerate_all_shortest(v, w, listing=True)
        checks += 1
        if n != len(listing):
            errors.append(f"path count {v}->{w}: {n} vs {len(listing)}")
    return checks


def cmd_verify(args) -> int:
    dims = [int(d) for d in args.dims.split(",") if d.strip()] if args.dims else []
    if any(d not in (1, 2, 3) for d in dims):
        raise InputError("--dims entries must be 1, 2 or 3")
    sizes = {1: (8, 16, 32), 2: (4, 6, 8), 3: (3, 4)}
    count = args.samples if args.samples is not None else 5
    errors, checks, cases = [], 0, 0
    rng = random.Random(args.seed)
    for d in dims:
        for n in sizes[d]:
            for _ in range(count):
                sigma = Permutation.random(GridGraph(d, n), rng.randrange(2 ** 63))
                checks += _verify_one(sigma, errors)
                cases += 1
    if cases == 0:
        print("warning: empty sweep, nothing verified", file=sys.stderr)
    for e in errors:
        print("mismatch: " + e, file=sys.stderr)
    _emit({"seed": args.seed, "cases": cases, "checks": checks, "mismatches": len(errors),
           "threads": _threads()}, args.out)
    return EXIT_FAIL if errors else EXIT_OK


def cmd_counterexample(args) -> int:
    rows = []
    ok = True
    for n in [int(t) for t in args.sizes.split(",")]:
        sol = solve(counterexample_permutation(n), single_path=True)
        sigma = sol.family.sigma
        literal = counterexample_census(sol, n * n)
        half = counterexample_census(sol, Fraction(n * n, 2))
        cert = certified_sup_lower_bound(sol)
        dist = displacement_norm(sigma, INF)
        rows.append({"N": n, "census_F_ge_N2": literal, "census_F_ge_N2_over_2": half,
                     "target_N2_over_2": Fraction(n * n, 2), "certified_sup": cert,
                     "dist_inf": dist, "dist_bound": 3 * (n - 1)})
        ok &= cert >= n * n and dist <= 3 * (n - 1)
    _emit({"seed": args.seed, "rows": rows}, args.out)
    return EXIT_OK if ok else EXIT_FAIL


def _realizer_sigma(args):
    from .realizer import ScopeError, check_scope, lift_planar
    sigma = _load_perm(args.perm)
    if sigma.graph.nu == 2:
        sigma = lift_planar(sigma)
    check_scope(sigma)
    return sigma


def cmd_realize(args) -> int:
    from .realizer import realize, trajectory
    sigma = _realizer_sigma(args)
    ps = _p_list(args.p)
    qs = _p_list(args.q)
    if len(ps) != 1 or len(qs) != 1:
        raise InputError("realize takes a single --p and a single --q")
    p = math.inf if ps[0] is INF else ps[0]
    q = math.inf if qs[0] is INF else qs[0]
    if q == math.inf:
        raise InputError("realize reports q < inf only")
    if args.samples < 0:
        raise InputError("--samples must be nonnegative")
    rep = realize(sigma, args.K, args.kappa, args.mode, args.samples, args.seed, p, q)
    rf = rep.pop("_round")
    if not args.timings:
        rep["timings"] = {}
    rep["threads"] = _threads()
    if args.traj_out:
        import numpy as np
        from .realizer import sample_subcube
        x, _ = sample_subcube(rf, 1, args.seed)
        with open(args.traj_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "z", "piece_id"])
            for row in (trajectory(rf, x[:1]) if len(x) else []):
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    _emit(rep, args.out)
    return EXIT_OK if rep["ok"] else EXIT_FAIL


def cmd_eval_field(args) -> int:
    import numpy as np
    from .realizer import assemble_round, derive_layout, time_one_map
    sigma = _realizer_sigma(args)
    try:
        with open(args.points) as fh:
            pts = np.asarray(json.load(fh), dtype=float)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise InputError(f"cannot read points from {args.points}: {exc}") from None
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError("points must be a list of [x, y, z] triples")
    lay = derive_layout(sigma.graph.n, args.K, args.kappa, args.mode)
    rf = assemble_round(sigma, lay, audit=False)
    ids = rf.forward.which(pts)
    vel = np.zeros_like(pts)
    for i in set(ids.tolist()) - {-1}:
        m = ids == i
        vel[m] = rf.forward.pieces[i].velocity(pts[m])
    rep = {"seed": args.seed, "points": pts.tolist(), "velocity_t0": vel.tolist(),
           "piece_id": ids.tolist(), "time_one_map": time_one_map(rf, pts).tolist()}
    _emit(rep, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridflow", description="Cube permutations as flows.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(sp, perm=True):
        if perm:
            sp.add_argument("--perm", required=True, help="permutation JSON file {nu, n, perm}")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="write the JSON report here instead of stdout")

    sp = sub.add_parser("solve-discrete", help="build and check a discrete flow")
    common(sp)
    sp.add_argument("--p", default="1,2,inf")
    sp.add_argument("--single-path", action="store_true")
    sp.set_defaults(fn=cmd_solve_discrete)

    sp = sub.add_parser("verify", help="closed forms against brute force")
    common(sp, perm=False)
    sp.add_argument("--dims", default="1,2,3")
    sp.add_argument("--samples", type=int, default=None, help="permutations per size")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("counterexample", help="usage census of the single-path counterexample")
    common(sp, perm=False)
    sp.add_argument("--sizes", default="4,8,16")
    sp.set_defaults(fn=cmd_counterexample)

    for name, fn in (("realize", cmd_realize), ("eval-field", cmd_eval_field)):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--K", type=int, default=2)
        sp.add_argument("--kappa", type=int, default=64)
        sp.add_argument("--mode", choices=("strict", "relaxed"), default="relaxed")
        sp.set_defaults(fn=fn)
        if name == "realize":
            sp.add_argument("--samples", type=int, default=1000)
            sp.add_argument("--p", default="2")
            sp.add_argument("--q", default="1")
            sp.add_argument("--traj-out")
            sp.add_argument("--timings", action="store_true", help="include wall-clock timings")
        else:
            sp.add_argument("--points", required=True, help="JSON list of [x, y, z]")
    return ap


def main(argv=None) -> int:
    from .continuum import GeometryError
    from .realizer import ScopeError
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        _threads()
        return args.fn(args)
    except ScopeError as exc:
        print(f"scope error: {exc}", file=sys.stderr)
        return EXIT_SCOPE
    except GeometryError as exc:
        print(f"construction failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (InputError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
