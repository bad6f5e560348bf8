"""Planted instances, the brute-force oracle, recall runs and exponent estimates."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core_math import RngStream, as_matrix, as_vector
from .errors import ContractViolation, EstimationFailure, InfeasibleParameters, InputError

__all__ = [
    "PlantedInstance",
    "gen_planted",
    "audit_planted",
    "gen_planted_sphere",
    "brute_force_nn",
    "RecallReport",
    "run_recall",
    "MCEstimate",
    "wilson_radius",
    "estimate_mc_params",
    "ball_lattice_trial",
    "check_rho_bound",
]


# ------------------------------------------------------------- planted data

@dataclass
class PlantedInstance:
    points: np.ndarray     # (n, d)
    queries: np.ndarray    # (q, d)
    planted: np.ndarray    # (q,) id of each query's planted neighbour
    c: float
    r: float = 1.0
    seed: int = 0

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def _unit_rows(rng: RngStream, k: int, d: int) -> np.ndarray:
    g = rng.normal((k, d))
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    nrm[nrm == 0] = 1.0
    return g / nrm


def _sq_dists(A, B):
    return np.maximum((A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T, 0.0)


def gen_planted(n: int, d: int, c: float, seed: int = 0, num_queries: int = None,
                spread: float = 4.0, max_rounds: int = 200) -> PlantedInstance:
    """Queries with one planted neighbour each at distance in (0, 1].

    Centres are Gaussian with scale chosen so typical distances are about
    ``spread * c``.  Every other dataset point is rejection-sampled to be
    farther than c from every query and from every other dataset point.
    """
    if n < 2 or d < 1:
        raise InputError("gen_planted needs n >= 2 and d >= 1")
    if c <= 1:
        raise InputError("gen_planted needs c > 1")
    nq = max(1, n // 4) if num_queries is None else int(num_queries)
    if not 0 <= nq <= n:
        raise InputError("number of queries must lie in [0, n]")
    rng = RngStream(seed, "planted")
    sigma = spread * c / math.sqrt(2.0 * d)
    c2 = c * c * (1 + 1e-9)
    c2_lin = math.sqrt(c2)  # query radius; points at distance <= c2_lin are rejected

    # queries: pairwise > c + 2 so a planted point cannot sit within c of another query
    queries = np.zeros((0, d))
    for _ in range(max_rounds):
        if queries.shape[0] >= nq:
            break
        cand = rng.normal((nq - queries.shape[0], d)) * sigma
        for x in cand:
            if queries.shape[0] and np.min(_sq_dists(x[None], queries)) <= (c + 2) ** 2:
                continue
            queries = np.vstack([queries, x])
            if queries.shape[0] >= nq:
                break
    if queries.shape[0] < nq:
        raise InfeasibleParameters(
            f"could not place {nq} well-separated queries in d={d}; increase d or spread, "
            "or request fewer queries", stage="gen_planted")
    radii = rng.uniform(0.0, 1.0, nq)
    radii = np.where(radii == 0.0, 1.0, radii)  # distances lie in (0, 1]
    planted_pts = queries + _unit_rows(rng, nq, d) * radii[:, None]

    accepted = [planted_pts]
    total = nq
    qtree = cKDTree(queries) if nq else None
    for _ in range(max_rounds):
        if total >= n:
            break
        cand = rng.normal((min(4096, max(16, 2 * (n - total))), d)) * sigma
        if qtree is not None:
            cand = cand[np.isinf(qtree.query(cand, k=1, distance_upper_bound=c2_lin)[0])]
        have = cKDTree(np.vstack(accepted))
        cand = cand[np.isinf(have.query(cand, k=1, distance_upper_bound=c2_lin)[0])]
        # greedy in draw order among candidates closer than c to each other
        clash = [[] for _ in range(cand.shape[0])]
        for i, j in cKDTree(cand).query_pairs(c2_lin):
            clash[max(i, j)].append(min(i, j))
        keep = np.zeros(cand.shape[0], dtype=bool)
        for i in range(cand.shape[0]):
            if total >= n:
                break
            if not any(keep[j] for j in clash[i]):
                keep[i] = True
                total += 1
        if keep.any():
            accepted.append(cand[keep])
    if total < n:
        raise InfeasibleParameters(
            f"rejection budget exhausted with {total}/{n} points: the ball of typical radius "
            f"{spread * c:.3g} in d={d} is too crowded for c={c}; raise d or spread",
            stage="gen_planted")
    pts = np.vstack(accepted)[:n]
    order = rng.permutation(n)          # new position of each generated point
    shuffled = np.empty_like(pts)
    shuffled[order] = pts
    planted = order[:nq].astype(np.int64)
    return PlantedInstance(shuffled, queries, planted, float(c), 1.0, seed)


def audit_planted(inst: PlantedInstance) -> dict:
    """Brute-force check of the planted geometry."""
    if inst.queries.shape[0] == 0:
        return {"ok": True, "planted_max": 0.0, "others_min": math.inf}
    D = np.sqrt(_sq_dists(inst.queries, inst.points))
    idx = np.arange(inst.queries.shape[0])
    pd = D[idx, inst.planted]
    D[idx, inst.planted] = np.inf
    others = float(D.min()) if D.size else math.inf
    pmax = float(pd.max())
    return {"ok": bool(pmax <= inst.r + 1e-9 and others > inst.c), "planted_max": pmax,
            "others_min": others}


def gen_planted_sphere(n: int, b: int, r: float, c: float, seed: int = 0,
                       num_queries: int = 200) -> PlantedInstance:
    """Uniform points on the unit sphere in R^b plus perturbed copies as queries.

    Each query sits at a chord distance uniform in (0, r] from its planted
    point.  Far points are not separated from queries: on a low-dimensional
    sphere a cap of chord radius cr covers a constant fraction of the
    surface, so separation would leave only a handful of queries.  The
    guarantee under test (some point within cr is returned whenever one
    within r exists) does not need it.
    """
    if n < 1 or b < 2:
        raise InputError("gen_planted_sphere needs n >= 1 and b >= 2")
    if not 0 < r < 2:
        raise InputError("sphere radius r must lie in (0, 2)")
    rng = RngStream(seed, "planted_sphere")
    pts = _unit_rows(rng, n, b)
    planted = rng.integers(0, n, num_queries).astype(np.int64)
    dist = rng.uniform(0.0, 1.0, num_queries)
    dist = r * np.where(dist == 0.0, 1.0, dist)
    # move along a uniform tangent direction so the chord length is exact
    base = pts[planted]
    tang = rng.normal((num_queries, b))
    tang -= np.einsum("ij,ij->i", tang, base)[:, None] * base
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    theta = 2.0 * np.arcsin(dist / 2.0)
    queries = np.cos(theta)[:, None] * base + np.sin(theta)[:, None] * tang
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    return PlantedInstance(pts, queries, planted, float(c), float(r), seed)


def brute_force_nn(points, q):
    """(id, distance) of the nearest point; ties go to the smallest id."""
    X = as_matrix(points)
    if X.shape[0] == 0:
        raise InputError("brute_force_nn on an empty dataset")
    q = as_vector(q, X.shape[1])
    d = np.linalg.norm(X - q, axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


# ---------------------------------------------------------------- recall

@dataclass
class RecallReport:
    strict: bool
    c: float
    results: list = field(default_factory=list)  # per-query dicts
    misses: list = field(default_factory=list)   # query indices without an answer
    seconds: float = 0.0

    @property
    def num_queries(self) -> int:
        return len(self.results)

    @property
    def found(self) -> int:
        return self.num_queries - len(self.misses)

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.results])) if self.results else 0.0

    def summary(self) -> dict:
        return {
            "queries": self.num_queries, "found": self.found, "misses": len(self.misses),
            "strict": self.strict, "c": self.c,
            "mean_candidates": self.mean("candidates"),
            "mean_fp_stage1": self.mean("fp_stage1"), "mean_fp_stage2": self.mean("fp_stage2"),
            "mean_fp_mid": self.mean("fp_mid"), "mean_filters": self.mean("filters_probed"),
            "seconds": self.seconds,
        }


def run_recall(index, inst: PlantedInstance, raise_on_strict_miss: bool = True) -> RecallReport:
    """Query every planted query; each answer must lie within c in R^d.

    A miss is a hard failure when the index is strict and a reported soft
    failure otherwise.
    """
    from .dim_reduction import query_top_index

    rep = RecallReport(strict=index.strict, c=index.c)
    t0 = time.perf_counter()
    for k, q in enumerate(inst.queries):
        res = query_top_index(index, q)
        if res.found:
            true = float(np.linalg.norm(inst.points[res.point_id] - q))
            if true > index.c + 1e-9:  # qualification is on the true distance; never expected
                raise ContractViolation(f"query {k}: returned point {res.point_id} at {true} > c")
        else:
            rep.misses.append(k)
        rep.results.append(res.to_dict())
    rep.seconds = time.perf_counter() - t0
    if rep.misses and rep.strict and raise_on_strict_miss:
        raise ContractViolation(f"{len(rep.misses)} Las Vegas misses in strict mode "
                                f"(first query {rep.misses[0]})")
    return rep


# ---------------------------------------------------------- estimation

def wilson_radius(k: int, n: int, z: float = 3.0) -> float:
    """Half-width of the Wilson score interval for k successes in n trials."""
    if n <= 0:
        return math.inf
    p = k / n
    return z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)


@dataclass
class MCEstimate:
    p1_hat: float
    p2_hat: float
    q_hat: float
    rho_hat: float
    trials: int
    counts: dict
    radii: dict
    ordering_ok: bool

    def to_dict(self) -> dict:
        return {"p1_hat": self.p1_hat, "p2_hat": self.p2_hat, "q_hat": self.q_hat,
                "rho_hat": self.rho_hat, "trials": self.trials, "counts": self.counts,
                "radii": self.radii, "ordering_ok": self.ordering_ok}


def ball_lattice_trial(b: int, w: float):
    """Trial function for one uniformly chosen ball of a random lattice family.

    Returns f(rng, k, dist) -> (in_x, in_y) for k independent trials: each
    draws a fresh offset (a uniform filter of a fresh family), a uniform
    point x in the fundamental cell and y = x + dist * (uniform direction).
    """
    period = 3.0 * w

    def trial(rng: RngStream, k: int, dist: float):
        v = rng.uniform(0.0, period, (k, b))
        x = rng.uniform(0.0, period, (k, b))
        y = x + dist * _unit_rows(rng, k, b)
        cx = np.rint((x - v) / period)
        cy = np.rint((y - v) / period)
        rx = x - v - period * cx
        ry = y - v - period * cy
        in_x = np.einsum("ij,ij->i", rx, rx) <= w * w
        in_y = (np.einsum("ij,ij->i", ry, ry) <= w * w) & np.all(cx == cy, axis=1)
        return in_x, in_y

    return trial


def estimate_mc_params(trial, r: float, cr: float, trials: int, rng: RngStream,
                       batch: int = 500_000, z: float = 3.0) -> MCEstimate:
    """p1 (close pairs both in), p2 (far pairs both in), q (one point in), rho.

    ``trial(rng, k, dist)`` runs k independent trials at pair distance dist
    and returns boolean arrays (x in filter, y in the same filter).
    """
    if trials < 1000:
        raise InputError("estimate_mc_params needs at least 1000 trials")
    k1 = k2 = kq = done = 0
    while done < trials:
        k = min(batch, trials - done)
        in_x, in_y = trial(rng.child(f"close/{done}"), k, r)
        k1 += int(np.sum(in_x & in_y))
        kq += int(np.sum(in_x))
        in_x, in_y = trial(rng.child(f"far/{done}"), k, cr)
        k2 += int(np.sum(in_x & in_y))
        done += k
    p1, p2, q = k1 / trials, k2 / trials, kq / trials
    counts = {"p1": k1, "p2": k2, "q": kq}
    radii = {key: wilson_radius(v, trials, z) for key, v in counts.items()}
    if k1 == 0 or k2 == 0 or q == p2:
        raise EstimationFailure(
            f"degenerate estimate (p1={p1:.4g}, p2={p2:.4g}, q={q:.4g}); the exponent "
            "ln(q/p1)/ln(q/p2) is undefined; raise trials or change radii")
    rho = math.log(q / p1) / math.log(q / p2)
    ordering = p2 <= p1 <= q  # flagged, never clamped
    return MCEstimate(p1, p2, q, rho, trials, counts, radii, bool(ordering))


def check_rho_bound(est: MCEstimate, c: float, p: float = 2.0, slack: float = 0.3) -> dict:
    """Compare rho_hat with the reference 1/c^p (informational apart from ordering)."""
    ref = 1.0 / c ** p
    return {
        "reference": ref, "rho_hat": est.rho_hat, "slack": slack,
        "within": bool(ref - slack <= est.rho_hat <= 1.0),
        "ordering_ok": est.ordering_ok,
        "passed": est.ordering_ok,
    }
