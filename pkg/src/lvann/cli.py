"""Command-line harness.

Every subcommand prints one JSON document on stdout.  Exit status: 0
success, 1 contract violation (a Las Vegas miss where the guarantee is
unconditional), 2 input error, 3 infeasible parameters.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import IndexConfig, load_config
from .core_math import RngStream
from .errors import ContractViolation, InputError, LVError

EXIT_OK, EXIT_CONTRACT, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def emit(obj, out=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    print(text)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _config(args) -> IndexConfig:
    cfg = load_config(args.config) if args.config else IndexConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.mode is not None:
        over["proj_mode"] = "full" if args.mode == "strict" else "subsampled"
    for kv in args.set or ():
        if "=" not in kv:
            raise InputError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        over[k.strip()] = v.strip()
    return cfg.replace(**over) if over else cfg


def _seed(args, default=0) -> int:
    return default if args.seed is None else args.seed


# ------------------------------------------------------------ subcommands

def cmd_gen_data(args):
    from .harness import audit_planted, gen_planted
    from .io import save_csv, save_fvecs

    inst = gen_planted(args.n, args.d, args.c, seed=_seed(args), num_queries=args.queries)
    audit = audit_planted(inst)
    rep = {"n": inst.n, "d": inst.d, "c": inst.c, "seed": inst.seed,
           "queries": int(inst.queries.shape[0]), "audit": audit}
    if args.out:
        save_fvecs(args.out + ".fvecs", inst.points)
        save_fvecs(args.out + ".queries.fvecs", inst.queries)
        save_csv(args.out + ".planted.csv", inst.planted[:, None])
        rep["files"] = [args.out + ext for ext in (".fvecs", ".queries.fvecs", ".planted.csv")]
    emit(rep)
    return EXIT_OK if audit["ok"] else EXIT_CONTRACT


def cmd_build(args):
    from .dim_reduction import build_top_index
    from .io import load_vectors, save_index

    X = load_vectors(args.data)
    cfg = _config(args)
    t0 = time.perf_counter()
    index = build_top_index(X, args.c, cfg)
    rep = {"record": index.record, "config": cfg.to_dict(), "seconds": time.perf_counter() - t0,
           "stored_rows": int(sum(m.ids.size for m in index.mids))}
    if args.out:
        rep["bytes"] = save_index(index, args.out)
        rep["index"] = args.out
    emit(rep)
    return EXIT_OK


def cmd_query(args):
    from .dim_reduction import query_top_index
    from .io import load_index, load_vectors

    index = load_index(args.index)
    Q = load_vectors(args.queries)
    results = [query_top_index(index, q).to_dict() for q in Q]
    emit({"record": index.record, "results": results,
          "found": sum(r["point_id"] is not None for r in results)}, args.out)
    return EXIT_OK


def _query_parallel(index, queries, workers: int):
    from .dim_reduction import query_top_index

    if workers <= 1:
        return [query_top_index(index, q) for q in queries]
    index.stored_views()  # fill the shared cache before threads read it
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda q: query_top_index(index, q), queries))  # merged in query order


def cmd_bench(args):
    from .dim_reduction import build_top_index
    from .harness import RecallReport, audit_planted, gen_planted

    cfg = _config(args)
    seeds = range(_seed(args), _seed(args) + args.seeds)
    runs = []
    strict_miss = False
    for seed in seeds:
        nq = min(500, args.n) if args.queries is None else args.queries
        inst = gen_planted(args.n, args.d, args.c, seed=seed, num_queries=nq)
        t0 = time.perf_counter()
        index = build_top_index(inst.points, args.c, cfg.replace(seed=seed))
        build_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        res = _query_parallel(index, inst.queries, args.workers)
        rep = RecallReport(strict=index.strict, c=index.c, seconds=time.perf_counter() - t0)
        for k, r in enumerate(res):
            if not r.found:
                rep.misses.append(k)
            elif np.linalg.norm(inst.points[r.point_id] - inst.queries[k]) > index.c + 1e-9:
                raise ContractViolation(f"seed {seed} query {k}: answer beyond c")
            rep.results.append(r.to_dict())
        strict_miss |= bool(rep.misses) and rep.strict
        runs.append({"seed": seed, "audit_ok": audit_planted(inst)["ok"], "build_seconds": build_s,
                     "summary": rep.summary(), "misses": rep.misses})
    emit({"record": index.record, "runs": runs,
          "total_misses": sum(len(r["misses"]) for r in runs),
          "soft_failures": 0 if index.strict else sum(len(r["misses"]) for r in runs)}, args.out)
    return EXIT_CONTRACT if strict_miss else EXIT_OK


def cmd_verify_family(args):
    from .ball_lattice import (BallLatticeParams, net_summary, sample_family,
                               success_prob_lower_bound)
    from .errors import VerificationFailure

    b = args.d if args.d is not None else 2
    params = BallLatticeParams.create(b, args.w, args.delta, args.N, max_resamples=args.max_resamples)
    rep = {"b": params.b, "w": params.w, "delta": params.delta, "shrunk_radius": params.shrunk_radius,
           "p_lb": success_prob_lower_bound(params), "N": params.N, "net": net_summary(params),
           "seed": _seed(args)}
    try:
        t0 = time.perf_counter()
        fam = sample_family(params, RngStream(_seed(args), "verify-family"))
        rep.update(passed=True, attempts=fam.attempts, failing_pair=None,
                   seconds=time.perf_counter() - t0)
        code = EXIT_OK
    except VerificationFailure as exc:
        rep.update(passed=False, failing_pair=[list(map(float, p)) for p in exc.failing_pair],
                   message=str(exc))
        code = exc.exit_code
    emit(rep, args.out)
    return code


def cmd_estimate_rho(args):
    from .harness import ball_lattice_trial, check_rho_bound, estimate_mc_params

    b = args.d if args.d is not None else 8
    est = estimate_mc_params(ball_lattice_trial(b, args.w), args.r, args.c * args.r, args.trials,
                             RngStream(_seed(args), "estimate-rho"))
    chk = check_rho_bound(est, args.c, args.p, args.slack)
    emit({"b": b, "w": args.w, "r": args.r, "c": args.c, "estimate": est.to_dict(), "check": chk},
         args.out)
    return EXIT_OK if chk["passed"] else EXIT_CONTRACT


def cmd_sphere_demo(args):
    from .harness import gen_planted_sphere
    from .spherical_filters import (SphericalParams, build_sphere_index, query_sphere_index,
                                    sample_spherical_family, solve_thresholds)

    b = args.d if args.d is not None else 3
    eta_u, eta_q = solve_thresholds(args.r, args.c, args.rho_u, args.rho_q, args.n, K=args.K)
    params = SphericalParams(b, args.r, args.c, eta_u, eta_q)
    t0 = time.perf_counter()
    fam = sample_spherical_family(params, RngStream(_seed(args), "sphere-demo"))
    inst = gen_planted_sphere(args.n, b, args.r, args.c, seed=_seed(args), num_queries=args.queries)
    index = build_sphere_index(inst.points, fam)
    build_s = time.perf_counter() - t0
    misses, cands, fps = [], [], []
    for k, q in enumerate(inst.queries):
        pid, nc, nf = query_sphere_index(index, q)
        if pid is None:
            misses.append(k)
        cands.append(nc)
        fps.append(nf)
    emit({"b": b, "r": args.r, "c": args.c, "eta_u": eta_u, "eta_q": eta_q, "N": fam.N,
          "net_size": fam.net.size, "attempts": fam.attempts, "n": args.n,
          "queries": int(inst.queries.shape[0]), "misses": misses,
          "mean_candidates": float(np.mean(cands)) if cands else 0.0,
          "mean_false_positives": float(np.mean(fps)) if fps else 0.0,
          "build_seconds": build_s}, args.out)
    # the family is verified, so any miss breaks the unconditional guarantee
    return EXIT_CONTRACT if misses else EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--n", type=int, default=2000)
    common.add_argument("--d", type=int, default=None, help="dimension (b for family subcommands)")
    common.add_argument("--c", type=float, default=2.0, help="approximation factor")
    common.add_argument("--mode", choices=("strict", "subsampled"), default=None,
                        help="strict enumerates every splitter tree")
    common.add_argument("--out", help="output path")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    p = argparse.ArgumentParser(prog="lvann", description="Las Vegas near-neighbor filters")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a planted instance")
    s.add_argument("--queries", type=int, default=None)
    s.set_defaults(func=cmd_gen_data, d_default=128)

    s = sub.add_parser("build", parents=[common], help="build and save an index")
    s.add_argument("data", help=".fvecs or CSV file")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("query", parents=[common], help="query a saved index")
    s.add_argument("index")
    s.add_argument("queries", help=".fvecs or CSV file")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("bench", parents=[common], help="planted recall benchmark")
    s.add_argument("--queries", type=int, default=None, help="queries per seed (default min(500, n))")
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_bench, d_default=128)

    s = sub.add_parser("verify-family", parents=[common], help="sample and verify a ball-lattice family")
    s.add_argument("--w", type=float, default=2.0)
    s.add_argument("--delta", type=float, default=None)
    s.add_argument("--N", type=int, default=None)
    s.add_argument("--max-resamples", type=int, default=16)
    s.set_defaults(func=cmd_verify_family)

    s = sub.add_parser("estimate-rho", parents=[common], help="Monte Carlo exponent estimate")
    s.add_argument("--w", type=float, default=3.0)
    s.add_argument("--r", type=float, default=1.0)
    s.add_argument("--trials", type=int, default=2_000_000)
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--slack", type=float, default=0.3)
    s.set_defaults(func=cmd_estimate_rho)

    s = sub.add_parser("sphere-demo", parents=[common], help="spherical filter planted demo")
    s.add_argument("--r", type=float, default=0.5)
    s.add_argument("--rho-u", type=float, default=0.4)
    s.add_argument("--rho-q", type=float, default=0.4)
    s.add_argument("--K", type=float, default=4.0)
    s.add_argument("--queries", type=int, default=200)
    s.set_defaults(func=cmd_sphere_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.d is None and hasattr(args, "d_default"):
        args.d = args.d_default
    try:
        return args.func(args)
    except LVError as exc:
        print(f"lvann: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
