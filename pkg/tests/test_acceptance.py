"""Acceptance suite: one test per criterion, each printing a PASS/FAIL/RED line.

RED marks a criterion whose stated parameters cannot run on this build
(the exhaustive verification net is too large); the test then checks a
feasible supplement at smaller b and is reported as xfail.
The collected verdicts are repeated in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from lvann.ball_lattice import (BallLatticeParams, collision_prob_upper_bound, net_summary,
                                sample_family)
from lvann.config import IndexConfig
from lvann.core_math import RngStream, gaussian_orthant, gaussian_tail, relative_cap_volume
from lvann.dim_reduction import build_top_index, query_top_index, reduce, sample_stage1, sample_stage2
from lvann.errors import InfeasibleParameters
from lvann.harness import (audit_planted, ball_lattice_trial, check_rho_bound, estimate_mc_params,
                           gen_planted, run_recall)
from lvann.splitters import (ProjCollection, complement_apply, enumerate_trees, find_splitting,
                             halving_apply, level_tolerances, sample_halving, tree_apply)
from lvann.tensor_index import TensorFamilyParams, sample_tensor_family

from oracles import box_net_check, leaf_distortion, lens_fraction, random_close_pairs, share_ball, tensor_share

pytestmark = pytest.mark.slow


def _settle(verdict, number, checks: dict, detail: str = ""):
    """Record PASS/FAIL from named boolean checks, then assert them."""
    failed = [k for k, ok in checks.items() if not ok]
    status = "FAIL" if failed else "PASS"
    verdict(number, status, detail + (f" failed: {', '.join(failed)}" if failed else ""))
    assert not failed, failed


def _share_chunked(family, X, Y, chunk=5000):
    return np.concatenate([share_ball(family, X[i:i + chunk], Y[i:i + chunk])
                           for i in range(0, len(X), chunk)])


# ---------------------------------------------------------------- 1

@pytest.mark.acceptance(1)
def test_c01_zero_false_negatives_default_config(verdict):
    t0 = time.perf_counter()
    misses, queries, audits = 0, 0, True
    for seed in range(5):
        inst = gen_planted(2000, 128, 2.0, seed=seed, num_queries=500)
        audits &= audit_planted(inst)["ok"]
        idx = build_top_index(inst.points, 2.0, IndexConfig(seed=seed))
        rep = run_recall(idx, inst, raise_on_strict_miss=False)
        misses += len(rep.misses)
        queries += rep.num_queries
    secs = time.perf_counter() - t0
    _settle(verdict, 1, {"no misses": misses == 0, "audit": audits, "under 10 min": secs < 600},
            f"(queries={queries}, misses={misses}, {secs:.0f}s)")


# ---------------------------------------------------------------- 2

@pytest.mark.acceptance(2)
def test_c02_strict_mode_las_vegas(verdict):
    # as stated (b = 8, m = 16) the ball family needs ~4e5 offsets and a ~7e14-point net
    stated = BallLatticeParams.create(8, 3.0)
    with pytest.raises(InfeasibleParameters):
        sample_family(stated, RngStream(0))

    # supplement: b = 1, m = 2b, every splitter tree enumerated
    proj = ProjCollection(2, 1, mode="full", eps=level_tolerances(2, 1))
    params = TensorFamilyParams(2, 1, proj.certificate, BallLatticeParams.create(1, 2.0), proj)
    fam = sample_tensor_family(params, RngStream(0, "c2"))
    x, y = random_close_pairs(np.random.default_rng(2), 100_000, 2, scale=100)
    share = tensor_share(fam, x, y)

    inst = gen_planted(500, 16, 2.0, seed=0, num_queries=125)
    cfg = IndexConfig(b=1, m=2, eps_B=proj.certificate, proj_mode="full")
    idx = build_top_index(inst.points, 2.0, cfg)
    rep = run_recall(idx, inst)  # raises on any strict miss
    checks = {"strict": idx.strict, "pairs share": bool(share.all()), "no misses": not rep.misses}
    detail = (f"(stated b=8 infeasible: N={stated.N}, net={net_summary(stated)['net_points']:.2e}; "
              f"supplement b=1 m=2: {int(share.sum())}/{share.size} pairs, "
              f"{rep.found}/{rep.num_queries} queries)")
    if not all(checks.values()):
        _settle(verdict, 2, checks, detail)
    verdict(2, "RED", detail + " supplement PASS")
    pytest.xfail("stated parameters infeasible; supplement passed")


# ---------------------------------------------------------------- 3

@pytest.mark.acceptance(3)
def test_c03_ball_lattice_verification(verdict):
    params = BallLatticeParams.create(3, 2.0)
    attempts, fam0 = [], None
    for seed in range(100):
        fam = sample_family(params, RngStream(seed, "c3"))
        attempts.append(fam.attempts)
        fam0 = fam0 or fam
    within = sum(a <= 4 for a in attempts)
    uncovered = box_net_check(fam0.offsets, 3, 2.0, params.delta)
    x, y = random_close_pairs(np.random.default_rng(3), 100_000, 3, scale=50)
    share = _share_chunked(fam0, x, y)
    _settle(verdict, 3, {">=95 of 100 within 4 attempts": within >= 95, "box net": uncovered == 0,
                         "pairs share": bool(share.all())},
            f"(N={params.N}, within4={within}/100, max attempts={max(attempts)}, "
            f"uncovered net pairs={uncovered}, pairs {int(share.sum())}/{share.size})")


# ---------------------------------------------------------------- 4

@pytest.mark.acceptance(4)
def test_c04_collision_bound(verdict):
    k = 1_000_000
    # only b and w matter for the bound; net spacing and offset count are unused here
    params = BallLatticeParams(2, 1.0, 0.1, 1)
    rng = np.random.default_rng(4)
    v = rng.uniform(0, params.period, (k, 2))
    x = np.zeros(2)
    y = np.array([1.0, 0.0])
    # the same residue arithmetic the family uses, against a plain radius-w ball
    cx, cy = np.rint((x - v) / params.period), np.rint((y - v) / params.period)
    rx, ry = x - v - params.period * cx, y - v - params.period * cy
    both = ((rx * rx).sum(1) <= 1) & ((ry * ry).sum(1) <= 1) & np.all(cx == cy, axis=1)
    rate = both.mean()
    lens = lens_fraction(2, 1.0, 1.0)
    bound = collision_prob_upper_bound(params, 1.0)
    se = math.sqrt(lens * (1 - lens) / k)
    _settle(verdict, 4, {"within 3 se": abs(rate - lens) <= 3 * se, "below bound": rate <= bound,
                         "quoted lens": abs(lens - 0.136489) < 5e-5, "quoted bound": abs(bound - 0.271871) < 5e-5},
            f"(rate={rate:.6f}, lens={lens:.6f}, se={se:.1e}, bound={bound:.6f})")


# ---------------------------------------------------------------- 5

def _uniform_ball(rng, k, b):
    g = rng.standard_normal((k, b))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.uniform(0, 1, (k, 1)) ** (1 / b)


@pytest.mark.acceptance(5)
def test_c05_cap_volume(verdict):
    grid_ok = all(relative_cap_volume(b, u) <= (1 - u * u) ** (b / 2) + 1e-15
                  for b in range(2, 21) for u in np.round(np.arange(0, 1.0001, 0.05), 10))
    rng = np.random.default_rng(5)
    worst = 0.0
    for b in (2, 5, 10):
        first = _uniform_ball(rng, 1_000_000, b)[:, 0]
        for u in (0.1, 0.5, 0.9):
            exact = relative_cap_volume(b, u)
            est = np.mean(first >= u)
            sd = math.sqrt(max(exact * (1 - exact), 1e-300) / first.size)
            worst = max(worst, abs(est - exact) / sd)
    _settle(verdict, 5, {"upper bound grid": grid_ok, "monte carlo 3 sigma": worst <= 3},
            f"(worst MC deviation {worst:.2f} sigma)")


# ---------------------------------------------------------------- 6

@pytest.mark.acceptance(6)
def test_c06_countsketch(verdict):
    d, dp = 64, 32
    eps = 4 / math.sqrt(dp)
    x = np.zeros(d)
    x[:2] = 1 / math.sqrt(2)
    rng = RngStream(6, "countsketch")
    fails = 0
    draws = 10_000
    for _ in range(draws):
        spec = sample_halving(d, rng)
        r0 = math.sqrt(2) * np.linalg.norm(halving_apply(spec, x))
        r1 = math.sqrt(2) * np.linalg.norm(complement_apply(spec, x))
        fails += abs(r0 - 1) > eps or abs(r1 - 1) > eps
    frac = fails / draws
    _settle(verdict, 6, {"below 0.25": frac < 0.25}, f"(failure fraction {frac:.4f})")


# ---------------------------------------------------------------- 7

@pytest.mark.acceptance(7)
def test_c07_splitting_certificates(verdict):
    rng = np.random.default_rng(7)
    xs = rng.standard_normal((1000, 256))
    e1 = np.eye(256)[0]
    configs = {"full 1-level": ProjCollection(256, 128, mode="full", seed=7),
               "subsampled s=8 2-level": ProjCollection(256, 64, mode="subsampled", s=8, seed=7)}
    checks, notes = {}, []
    for name, coll in configs.items():
        worst_cert = 0.0
        ok = True
        for x in xs:
            tree = find_splitting(coll, x)  # NotFound would fail the test
            per_level = leaf_distortion(tree, x)
            ok &= all(w <= e + 1e-12 for w, e in zip(per_level, coll.eps))
            for comp in tree_apply(tree, x):
                ratio = np.linalg.norm(comp) / np.linalg.norm(x) * math.sqrt(coll.m / coll.b)
                worst_cert = max(worst_cert, abs(ratio - 1))
        checks[f"{name} per-level"] = ok
        checks[f"{name} certificate"] = worst_cert <= coll.certificate + 1e-12
        # every tree for the small collection; a random sample of the huge full one
        if coll.size <= 10_000:
            trees = list(enumerate_trees(coll))
        else:
            trees = [coll.tree_at(int(i)) for i in rng.integers(0, coll.size, 1000)]
        checks[f"{name} e1 exact"] = max(max(leaf_distortion(t, e1)) for t in trees) < 1e-12
        notes.append(f"{name}: worst {worst_cert:.3f} <= {coll.certificate:.3f}, e1 over {len(trees)} trees")
    _settle(verdict, 7, checks, "(" + "; ".join(notes) + ")")


# ---------------------------------------------------------------- 8

def _tail(dec, X, thresh=0.5):
    """Fraction of (vector, block) pairs whose rescaled block norm is off by more than thresh."""
    blocks = np.linalg.norm(reduce(X, dec), axis=2) / np.linalg.norm(X, axis=1)
    return float(np.mean(np.abs(blocks - 1) > thresh))


@pytest.mark.acceptance(8)
def test_c08_one_sided_reduction(verdict):
    d, block = 1024, 64
    rng = np.random.default_rng(8)
    stages = {"stage1": sample_stage1(d, block, RngStream(8, "s1")),
              "stage2": sample_stage2(d, block, RngStream(8, "s2"))}
    worst_rel, below = 0.0, True
    for _ in range(10):  # 10 chunks of 1e4 pairs
        X, Y = rng.standard_normal((10_000, d)), rng.standard_normal((10_000, d))
        true2 = np.sum((X - Y) ** 2, axis=1)
        for dec in stages.values():
            bd2 = np.sum((reduce(X, dec) - reduce(Y, dec)) ** 2, axis=2)
            worst_rel = max(worst_rel, float(np.max(np.abs(bd2.mean(axis=0) - true2) / true2)))
            below &= bool(np.all(bd2.min(axis=0) <= true2 * (1 + 1e-12)))
    # stage 1 must also handle sparse inputs, which a plain block split would not
    gauss = rng.standard_normal((10_000, d))
    sparse = np.zeros((10_000, d))
    sparse[np.arange(10_000), rng.integers(0, d, 10_000)] = 1.0
    sparse[np.arange(10_000), rng.integers(0, d, 10_000)] += 1.0
    t1 = max(_tail(stages["stage1"], gauss), _tail(stages["stage1"], sparse))
    t64 = _tail(stages["stage2"], gauss)
    t16 = _tail(sample_stage2(d, 16, RngStream(8, "s2-16")), gauss)
    _settle(verdict, 8, {"pigeonhole exact": worst_rel < 1e-9, "min block <= distance": below,
                         "stage1 tail < 0.05": t1 < 0.05, "stage2 tail 64 < 16": t64 < t16},
            f"(pigeonhole rel err {worst_rel:.1e}; stage1 P(>0.5)={t1:.4f}; "
            f"stage2 P(>0.5) {t64:.4f} at 64 vs {t16:.4f} at 16)")


# ---------------------------------------------------------------- 9

@pytest.mark.acceptance(9)
def test_c09_gaussian_numerics(verdict):
    f0 = abs(gaussian_tail(0.0) - 0.5)
    fact = max(abs(gaussian_orthant(math.sqrt(2), a, b) - gaussian_tail(a) * gaussian_tail(b))
               for a in (0, 1, 2) for b in (0, 1, 2))
    rng = np.random.default_rng(9)
    eta, sig = 1.0, 0.5
    worst = 0.0
    for s in (0.5, 1.0, 1.5):
        rho = 1 - s * s / 2  # inner product of unit vectors at distance s
        hits = 0
        for _ in range(10):
            z1 = rng.standard_normal(1_000_000)
            z2 = rho * z1 + math.sqrt(1 - rho * rho) * rng.standard_normal(1_000_000)
            hits += int(np.sum((z1 >= eta) & (z2 >= sig)))
        g = gaussian_orthant(s, eta, sig)
        est = hits / 10_000_000
        worst = max(worst, abs(est - g) / math.sqrt(g * (1 - g) / 10_000_000))
    _settle(verdict, 9, {"F(0)": f0 <= 1e-12, "right-angle factorization": fact <= 1e-8,
                         "monte carlo 3 sigma": worst <= 3},
            f"(|F(0)-1/2|={f0:.1e}, factorization err {fact:.1e}, worst MC {worst:.2f} sigma)")


# ---------------------------------------------------------------- 10

def _sphere_pairs(rng, k, b, max_dist):
    x = rng.standard_normal((k, b))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    t = rng.standard_normal((k, b))
    t -= np.einsum("ij,ij->i", t, x)[:, None] * x
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    th = 2 * np.arcsin(rng.uniform(0, max_dist, k) / 2)
    y = np.cos(th)[:, None] * x + np.sin(th)[:, None] * t
    return x, y / np.linalg.norm(y, axis=1, keepdims=True)


@pytest.mark.acceptance(10)
def test_c10_spherical_family(verdict, capsys):
    import json

    from lvann.cli import main
    from lvann.spherical_filters import (SphericalParams, build_cap_net, decode_spherical,
                                         sample_spherical_family, solve_thresholds, verify_spherical)

    r, c, b = 0.5, 2.0, 3
    eu, eq = solve_thresholds(r, c, 0.4, 0.4, 1000, K=4)
    with pytest.raises(InfeasibleParameters):
        build_cap_net(8, r, 1 / 8)  # the stated b = 8 net
    params = SphericalParams(b, r, c, eu, eq)
    fam = sample_spherical_family(params, RngStream(10, "c10"))
    rng = np.random.default_rng(10)
    x, y = _sphere_pairs(rng, 10_000, b, r)
    shared = sum(bool(decode_spherical(fam, a, "update") & decode_spherical(fam, q, "query"))
                 for a, q in zip(x, y))
    # a fixed point's count in a fresh family is Binomial(N, F(eta)); pool 20 families
    zs = {}
    fams = [sample_spherical_family(params, RngStream(s, "c10-counts")) for s in range(20)]
    for side, eta in (("update", eu), ("query", eq)):
        total = 0
        for f in fams:
            p = rng.standard_normal(b)
            p /= np.linalg.norm(p)
            cube = f.cover.cubes_of(p)[0]
            total += len(f.decode_canonical(f.cover.to_canonical(cube, p), side))
        F = gaussian_tail(eta)
        trials = 20 * fams[0].N
        zs[side] = abs(total - trials * F) / math.sqrt(trials * F * (1 - F))
    code = main(["sphere-demo", "--d", str(b), "--n", "1000", "--queries", "200", "--seed", "10"])
    demo = json.loads(capsys.readouterr().out)
    checks = {"verified": fam.verified and verify_spherical(fam), "pairs share": shared == 10_000,
              "counts 3 sigma": max(zs.values()) <= 3, "demo": code == 0 and not demo["misses"]}
    detail = (f"(stated b=8 net infeasible; supplement b={b}: N={fam.N}, pairs {shared}/10000, "
              f"count z update {zs['update']:.2f} query {zs['query']:.2f}, "
              f"demo {demo['queries'] - len(demo['misses'])}/{demo['queries']})")
    if not all(checks.values()):
        _settle(verdict, 10, checks, detail)
    verdict(10, "RED", detail + " supplement PASS")
    pytest.xfail("stated parameters infeasible; supplement passed")


# ---------------------------------------------------------------- 11

@pytest.mark.acceptance(11)
def test_c11_rho_estimator(verdict):
    from lvann.spherical_filters import solve_thresholds

    c = 2.0
    est = estimate_mc_params(ball_lattice_trial(8, 3.0), 1.0, c, 2_000_000, RngStream(11, "c11"))
    chk = check_rho_bound(est, c)
    rad = est.radii  # already 3-sigma half-widths
    separated = est.p2_hat + rad["p2"] < est.p1_hat - rad["p1"]
    r, n, K = 0.5, 1000, 4
    eu, eq = solve_thresholds(r, c, 0.4, 0.4, n, K=K)
    g_r = gaussian_orthant(r, eu, eq)
    plug = abs(gaussian_tail(eu) / g_r / n ** (0.4 / K) - 1)
    far_ok = gaussian_orthant(c * r, eu, eq) / g_r <= n ** ((0.4 - 1) / K) * 1.05
    _settle(verdict, 11, {"p2 < p1 (3 sigma)": separated, "p1 <= q": est.p1_hat <= est.q_hat,
                          "rho in range": 1 / c ** 2 - 0.3 <= est.rho_hat <= 1, "ordering": chk["passed"],
                          "thresholds plug back": plug < 1e-6 and far_ok},
            f"(p1={est.p1_hat:.4g}, p2={est.p2_hat:.4g}, q={est.q_hat:.4g}, rho_hat={est.rho_hat:.3f}, "
            f"reference {1 / c ** 2:.3f})")


# ---------------------------------------------------------------- 12

def _shell_instance(seed, nq=200, per=10, d=128):
    """Fixed instance for every c: per query, one point within 1 and per-1 points at 1.5 to 4.

    Query clusters sit far apart, so only a query's own cluster can qualify.
    """
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((nq, d)) * 3.0
    dirs = rng.standard_normal((nq, per, d))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    radii = np.concatenate([rng.uniform(0, 1, (nq, 1)), rng.uniform(1.5, 4.0, (nq, per - 1))], axis=1)
    P = (Q[:, None, :] + radii[..., None] * dirs).reshape(-1, d)
    return P[rng.permutation(P.shape[0])], Q


@pytest.mark.acceptance(12)
def test_c12_candidates_fall_with_c(verdict):
    # the desk radius floor makes the filters independent of c, so the decrease
    # comes from stopping at the first point within c on a fixed instance
    P, Q = _shell_instance(12)
    stats, misses = {}, 0
    for c in (1.5, 2.0, 3.0):
        means = []
        for seed in range(5):
            idx = build_top_index(P, c, IndexConfig(seed=seed))
            res = [query_top_index(idx, q) for q in Q]
            misses += sum(not r.found for r in res)
            means.append(np.mean([r.candidates for r in res]))
        stats[c] = (float(np.mean(means)), float(np.std(means, ddof=1) / math.sqrt(5)))
    steps = {}
    for lo, hi in ((1.5, 2.0), (2.0, 3.0)):
        (m0, s0), (m1, s1) = stats[lo], stats[hi]
        steps[f"{lo}->{hi}"] = m0 - m1 > 3 * math.hypot(s0, s1)
    _settle(verdict, 12, {**steps, "no misses": misses == 0},
            "(n=2000, d=128; " + ", ".join(f"c={c}: {m:.2f}+-{s:.2f}" for c, (m, s) in stats.items()) + ")")


# ---------------------------------------------------------------- 13

@pytest.mark.acceptance(13)
def test_c13_determinism_and_io(verdict, tmp_path, capsys, monkeypatch):
    from lvann.cli import main
    from lvann.io import index_to_bytes, load_fvecs, load_index, save_fvecs, save_index

    inst = gen_planted(300, 32, 2.0, seed=13, num_queries=30)
    cfg = IndexConfig(seed=13)
    a = index_to_bytes(build_top_index(inst.points, 2.0, cfg))
    b = index_to_bytes(build_top_index(inst.points, 2.0, cfg))
    path = tmp_path / "i.lvann"
    save_index(build_top_index(inst.points, 2.0, cfg), path)
    idx_rt = index_to_bytes(load_index(path)) == a
    save_fvecs(tmp_path / "p.fvecs", inst.points)
    fv_rt = np.array_equal(load_fvecs(tmp_path / "p.fvecs"), inst.points.astype(np.float32))

    codes = {}
    codes[0] = main(["bench", "--n", "200", "--d", "16", "--queries", "10", "--mode", "strict"])
    codes[2] = main(["build", str(tmp_path / "missing.fvecs")])
    codes[3] = main(["verify-family", "--d", "2", "--w", "3", "--N", "3", "--max-resamples", "2"])
    real = query_top_index
    import lvann.dim_reduction as dr
    monkeypatch.setattr(dr, "query_top_index", lambda index, q: real(index, np.full(len(q), 1e6)))
    codes[1] = main(["bench", "--n", "200", "--d", "16", "--queries", "10", "--mode", "strict"])
    capsys.readouterr()
    _settle(verdict, 13, {"byte-identical rebuild": a == b, "index round trip": idx_rt,
                          "fvecs round trip": fv_rt, **{f"exit {k}": v == k for k, v in codes.items()}},
            f"({len(a)} index bytes; exit codes {sorted(codes.values())})")
