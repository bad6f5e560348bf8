"""Gaussian-threshold filters on the unit sphere with net verification.

A filter is a Gaussian vector z; a stored point u joins it when
<z, u> >= eta_u and a query q joins it when <z, q> >= eta_q.  To make the
family Las Vegas the sphere is covered by overlapping axis-aligned cubes
(side r(b+2), centres on a shifted lattice of spacing r*b), every cube's
cap is rotated onto a fixed pole by a Householder reflection, and points
are rounded to a finite net of that canonical cap before thresholding.
One family of z vectors, verified on every close net pair, then serves all
caps.  Rounding moves points by at most r*delta_s, so continuum pairs at
distance <= r become net pairs at distance <= r(1 + 2 delta_s), which the
verification covered.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.spatial import cKDTree

from .core_math import (RngStream, as_matrix, as_vector, gaussian_orthant, gaussian_tail,
                        gaussian_tail_inverse, unit_ball_volume)
from .errors import DecodeOverflow, InfeasibleParameters, InputError, VerificationFailure
from .splitters import ProjCollection, enumerate_trees

__all__ = [
    "SphericalParams",
    "CapCover",
    "CapNet",
    "build_cap_net",
    "SphericalFamily",
    "sample_spherical_family",
    "decode_spherical",
    "verify_spherical",
    "solve_thresholds",
    "tradeoff_margin",
    "SphTensorFamily",
    "sample_sph_tensor_family",
    "decode_sph_tensor",
    "SphereIndex",
    "build_sphere_index",
    "query_sphere_index",
    "DEFAULT_NET_CAP",
]

DEFAULT_NET_CAP = 200_000
_UNIT_TOL = 1e-9


def _alpha_beta(s: float):
    alpha = 1.0 - 0.5 * s * s
    return alpha, math.sqrt(max(0.0, 1.0 - alpha * alpha))


@dataclass(frozen=True)
class SphericalParams:
    b: int
    r: float
    c: float
    eta_u: float
    eta_q: float
    delta_s: float = None
    K: float = 1.0
    max_resamples: int = 16
    net_cap: int = DEFAULT_NET_CAP

    def __post_init__(self):
        if self.b < 2:
            raise InputError("spherical filters need b >= 2")
        if not (0 < self.r < 2) or self.c <= 1:
            raise InputError("need 0 < r < 2 and c > 1")
        if not (math.isfinite(self.eta_u) and math.isfinite(self.eta_q)):
            raise InputError("thresholds must be finite")
        if self.delta_s is None:
            object.__setattr__(self, "delta_s", 1.0 / self.b)
        if self.delta_s <= 0:
            raise InputError("delta_s must be positive")

    @property
    def slack_radius(self) -> float:
        """Net pairs up to this distance are checked: r(1 + 2 delta_s)."""
        return self.r * (1.0 + 2.0 * self.delta_s)

    def pair_prob(self) -> float:
        """G at the slack radius: per-filter chance a checked net pair collides."""
        s = self.slack_radius
        if s >= 2.0:
            return _antipodal(self.eta_u, self.eta_q)
        return gaussian_orthant(s, self.eta_u, self.eta_q)

    def required_filters(self, net_size: int) -> int:
        p = self.pair_prob()
        if p <= 0:
            raise InfeasibleParameters("collision probability at the slack radius is 0",
                                       stage="spherical")
        return math.ceil((2.0 * math.log(max(net_size, 2)) + math.log(2.0)) / p)

    def to_dict(self) -> dict:
        return {"b": self.b, "r": self.r, "c": self.c, "eta_u": self.eta_u, "eta_q": self.eta_q,
                "delta_s": self.delta_s, "K": self.K}


def _antipodal(eta_u, eta_q):
    # u = -q: need <z,u> >= eta_u and <z,u> <= -eta_q
    lo, hi = eta_u, -eta_q
    return max(0.0, gaussian_tail(lo) - gaussian_tail(hi)) if hi > lo else 0.0


# ------------------------------------------------------------- cap cover

@dataclass(frozen=True)
class CapCover:
    """Cubes of side r(b+2) centred on shift + r*b*Z^b."""

    b: int
    r: float
    shift: np.ndarray

    @property
    def spacing(self) -> float:
        return self.r * self.b

    @property
    def half_side(self) -> float:
        return 0.5 * self.r * (self.b + 2)

    @property
    def cap_radius(self) -> float:
        """Every sphere point of a cube is this close to the cube's pole."""
        return self.r * (self.b + 2) * math.sqrt(self.b)

    def cubes_of(self, x) -> list:
        """Lattice coordinates of all cubes containing x."""
        lo = np.ceil((x - self.shift - self.half_side) / self.spacing - 1e-12).astype(np.int64)
        hi = np.floor((x - self.shift + self.half_side) / self.spacing + 1e-12).astype(np.int64)
        out = []
        for k in itertools.product(*(range(a, z + 1) for a, z in zip(lo, hi))):
            centre = self.shift + self.spacing * np.asarray(k)
            if np.max(np.abs(x - centre)) <= self.half_side:
                out.append(tuple(int(v) for v in k))
        return out

    def pole(self, cube) -> np.ndarray:
        centre = self.shift + self.spacing * np.asarray(cube, dtype=np.float64)
        nrm = np.linalg.norm(centre)
        if nrm < 1e-12:
            e = np.zeros(self.b)
            e[0] = 1.0
            return e
        return centre / nrm

    def to_canonical(self, cube, x) -> np.ndarray:
        """Householder reflection taking the cube's pole to e_1, applied to x."""
        v = self.pole(cube).copy()
        v[0] -= 1.0
        vv = float(v @ v)
        if vv < 1e-24:
            return np.array(x, dtype=np.float64)
        return x - (2.0 * float(v @ x) / vv) * v


# ------------------------------------------------------------------- net

@dataclass
class CapNet:
    points: np.ndarray  # (L, b) unit vectors around the pole e_1
    spacing: float
    tree: cKDTree = field(default=None, repr=False)

    def __post_init__(self):
        self.tree = cKDTree(self.points)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def round(self, X) -> np.ndarray:
        """Index of the nearest net point for each row."""
        _, idx = self.tree.query(np.atleast_2d(X))
        return np.asarray(idx, dtype=np.int64)


def _net_estimate(b: int, spacing: float, cap_radius: float) -> float:
    half = 0.5 * spacing * math.sqrt(b)
    shell = unit_ball_volume(b) * ((1 + half) ** b - max(0.0, 1 - half) ** b)
    frac = 1.0 if cap_radius >= 2 else min(1.0, (cap_radius + spacing) ** (b - 1))
    return shell * frac / spacing ** b


def build_cap_net(b: int, r: float, delta_s: float, net_cap: int = DEFAULT_NET_CAP) -> CapNet:
    """Grid of spacing r*delta_s/sqrt(b) near the sphere, projected onto it.

    Only grid points within half a grid diagonal of the sphere are kept; each
    sphere point has such a grid point within r*delta_s/2, whose projection
    is then within r*delta_s.  Points are kept if they lie within the cap
    radius (plus r*delta_s) of the pole e_1.
    """
    spacing = r * delta_s / math.sqrt(b)
    cap_radius = r * (b + 2) * math.sqrt(b)
    est = _net_estimate(b, spacing, cap_radius)
    half = 0.5 * spacing * math.sqrt(b)
    per_axis = 2 * math.ceil((1 + half) / spacing) + 1
    if est > net_cap or per_axis ** b > 50 * net_cap:
        raise InfeasibleParameters(
            f"cap net would hold ~{est:.3g} points (grid box {per_axis}^{b}), above the cap "
            f"{net_cap}; use a smaller b or larger delta_s", stage="spherical")
    reach = math.ceil((1 + half) / spacing)
    axis = np.arange(-reach, reach + 1) * spacing
    grid = np.stack(np.meshgrid(*([axis] * b), indexing="ij"), -1).reshape(-1, b)
    norms = np.linalg.norm(grid, axis=1)
    keep = (np.abs(norms - 1.0) <= half) & (norms > 0)
    pts = grid[keep] / norms[keep, None]
    pole = np.zeros(b)
    pole[0] = 1.0
    pts = pts[np.linalg.norm(pts - pole, axis=1) <= cap_radius + r * delta_s]
    return CapNet(pts, spacing)


# ---------------------------------------------------------------- family

@dataclass
class SphericalFamily:
    params: SphericalParams
    Z: np.ndarray          # (N, b) raw Gaussian filter vectors
    cover: CapCover
    net: CapNet
    verified: bool = False
    attempts: int = 0
    _member: dict = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    def threshold(self, side: str) -> float:
        if side == "update":
            return self.params.eta_u
        if side == "query":
            return self.params.eta_q
        raise InputError(f"side must be 'update' or 'query', got {side!r}")

    def net_members(self, side: str) -> np.ndarray:
        """Boolean (L, N): net point i lies in filter j on this side."""
        if side not in self._member:
            self._member[side] = (self.net.points @ self.Z.T) >= self.threshold(side)
        return self._member[side]

    def decode_canonical(self, y, side: str) -> np.ndarray:
        """Filter indices for a point already in the canonical frame."""
        i = self.net.round(y)[0]
        return np.nonzero(self.net_members(side)[i])[0]

    def decode(self, x, side: str = "update") -> set:
        x = _unit(x, self.params.b)
        out = set()
        for cube in self.cover.cubes_of(x):
            y = self.cover.to_canonical(cube, x)
            out.update((cube, int(j)) for j in self.decode_canonical(y, side))
        return out


def _unit(x, dim):
    x = as_vector(x, dim)
    if abs(np.linalg.norm(x) - 1.0) > _UNIT_TOL:
        raise InputError(f"expected a unit vector, got norm {np.linalg.norm(x):.12g}")
    return x


def decode_spherical(family: SphericalFamily, x, side: str = "update") -> set:
    """(cube, filter index) pairs containing x on the given side."""
    return family.decode(x, side)


def _net_pairs(net: CapNet, radius: float) -> np.ndarray:
    pairs = net.tree.query_pairs(radius, output_type="ndarray")
    selfs = np.repeat(np.arange(net.size)[:, None], 2, axis=1)
    both = np.concatenate([pairs, pairs[:, ::-1], selfs]) if pairs.size else selfs
    return both.astype(np.int64)


def _check_spherical(family: SphericalFamily, pairs: np.ndarray):
    pu = np.packbits(family.net_members("update"), axis=1)
    pq = np.packbits(family.net_members("query"), axis=1)
    chunk = max(1, 8_000_000 // max(1, pu.shape[1]))
    for s in range(0, pairs.shape[0], chunk):
        blk = pairs[s:s + chunk]
        hit = np.any(pu[blk[:, 0]] & pq[blk[:, 1]], axis=1)
        if not hit.all():
            i, j = blk[np.argmin(hit)]
            return False, (family.net.points[i], family.net.points[j])
    return True, None


def verify_spherical(family: SphericalFamily) -> bool:
    """Every ordered net pair within r(1+2 delta_s) shares an (update, query) filter."""
    pairs = _net_pairs(family.net, family.params.slack_radius)
    ok, _ = _check_spherical(family, pairs)
    return ok


def sample_spherical_family(params: SphericalParams, rng: RngStream, N: int = None) -> SphericalFamily:
    """Sample a cap cover and Gaussian filters, resampling until verified."""
    net = build_cap_net(params.b, params.r, params.delta_s, params.net_cap)
    N = params.required_filters(net.size) if N is None else int(N)
    if N * net.size > 400_000_000:
        raise InfeasibleParameters(
            f"{N} filters over a {net.size}-point net is beyond the desk budget; "
            "lower the thresholds (e.g. raise K in solve_thresholds)", stage="spherical")
    pairs = _net_pairs(net, params.slack_radius)
    failing = None
    for attempt in range(1, params.max_resamples + 1):
        shift = rng.uniform(0.0, params.r * params.b, params.b)
        Z = rng.normal((N, params.b))
        fam = SphericalFamily(params, Z, CapCover(params.b, params.r, shift), net, attempts=attempt)
        ok, failing = _check_spherical(fam, pairs)
        if ok:
            fam.verified = True
            return fam
    raise VerificationFailure(
        f"no verified spherical family after {params.max_resamples} attempts "
        f"(N={N}, |L|={net.size})", failing_pair=failing)


# ------------------------------------------------------------- thresholds

def tradeoff_margin(r: float, c: float, rho_u: float, rho_q: float) -> float:
    """(1 - a_r a_cr) sqrt(rho_q) + (a_r - a_cr) sqrt(rho_u) - b_r b_cr.

    a_s = 1 - s^2/2 and b_s = sqrt(1 - a_s^2) are the cosine and sine of
    the angle between unit vectors at distance s.  Non-negative margin means
    (rho_u, rho_q) lies on or above the tradeoff curve; at c r = sqrt 2 this
    is c^2 sqrt(rho_q) + (c^2 - 1) sqrt(rho_u) >= sqrt(2c^2 - 1) up to the
    positive factor 1/c^2.
    """
    ar, br = _alpha_beta(r)
    ac, bc = _alpha_beta(c * r)
    return (1 - ar * ac) * math.sqrt(rho_q) + (ar - ac) * math.sqrt(rho_u) - br * bc


def _ratios(r, c, eta_u, eta_q):
    g_r = gaussian_orthant(r, eta_u, eta_q)
    g_cr = gaussian_orthant(min(c * r, 2 - 1e-12), eta_u, eta_q)
    return gaussian_tail(eta_u) / g_r, gaussian_tail(eta_q) / g_r, g_cr / g_r


def solve_thresholds(r: float, c: float, rho_u: float, rho_q: float, n: int, K: float = 1.0,
                     slack: float = 1.05):
    """Thresholds meeting the three update/query/far-collision ratio targets.

    Targets: F(eta_u)/G(r) = n^(rho_u/K), F(eta_q)/G(r) = n^(rho_q/K) and
    G(cr)/G(r) <= n^((rho_q - 1)/K).  The first two are solved as equalities
    (eta_q is a function of eta_u through F(eta_q) = F(eta_u) T_q / T_u, then
    eta_u by root finding); the third is then checked within ``slack``.
    """
    if not (0 < r < 2 and c > 1 and c * r < 2):
        raise InputError("need 0 < r < c r < 2 and c > 1")
    if n < 2 or K <= 0:
        raise InputError("need n >= 2 and K > 0")
    if not (0 <= rho_u and 0 <= rho_q):
        raise InputError("exponents must be non-negative")
    margin = tradeoff_margin(r, c, rho_u, rho_q)
    if margin < 0:
        raise InfeasibleParameters(
            f"(rho_u={rho_u}, rho_q={rho_q}) lies below the tradeoff curve: "
            f"(1-a_r a_cr)sqrt(rho_q) + (a_r-a_cr)sqrt(rho_u) - b_r b_cr = {margin:.4g} < 0",
            stage="spherical")
    t_u = n ** (rho_u / K)
    t_q = n ** (rho_q / K)
    t_far = n ** ((rho_q - 1.0) / K)
    ratio = t_q / t_u

    def eta_q_of(eta_u):
        return gaussian_tail_inverse(min(gaussian_tail(eta_u) * ratio, 1 - 1e-15))

    def gap(eta_u):
        return math.log(gaussian_tail(eta_u) / gaussian_orthant(r, eta_u, eta_q_of(eta_u))) - math.log(t_u)

    # ratio <= 1 keeps F(eta_q) valid for every eta_u; otherwise start where F(eta_u) = 1/ratio
    lo = -6.0 if ratio <= 1 else gaussian_tail_inverse(min(1 - 1e-12, 1.0 / ratio)) + 1e-9
    hi = max(lo + 1.0, 1.0)
    if gap(lo) > 0:
        raise InfeasibleParameters(f"update ratio target {t_u:.4g} is below the smallest "
                                   "achievable ratio", stage="spherical")
    while gap(hi) < 0:
        hi += 2.0
        if hi > 30:
            raise InfeasibleParameters("threshold search left the numerically safe range",
                                       stage="spherical")
    eta_u = optimize.brentq(gap, lo, hi, xtol=1e-12)
    eta_q = eta_q_of(eta_u)
    if rho_u == rho_q:
        eta_q = eta_u
    ru, rq, rf = _ratios(r, c, eta_u, eta_q)
    checks = [(ru, t_u), (rq, t_q), (rf, t_far)]
    if any(val > tgt * slack for val, tgt in checks):
        raise InfeasibleParameters(
            f"thresholds (eta_u={eta_u:.4g}, eta_q={eta_q:.4g}) miss a target beyond slack {slack}: "
            f"ratios {ru:.4g}/{t_u:.4g}, {rq:.4g}/{t_q:.4g}, {rf:.4g}/{t_far:.4g}; "
            "raise n or move (rho_u, rho_q) further above the curve", stage="spherical")
    return eta_u, eta_q


# ------------------------------------------------------- tensored family

@dataclass
class SphTensorFamily:
    """Spherical families tensored over the trees of a ProjCollection."""

    m: int
    b: int
    r: float
    c: float
    eps_B: float
    base: SphericalParams        # per-component params with r' and scaled thresholds
    proj: ProjCollection
    trees: list
    families: list               # families[t][i]
    rotation: np.ndarray = None  # shared pre-rotation (m x m), identity if None
    id_cap: int = 1 << 20

    @property
    def parts(self) -> int:
        return self.m // self.b

    def component_sets(self, x, side: str) -> list:
        """Per tree, the per-leaf decode sets (None when rejected)."""
        x = _unit(x, self.m)
        if self.rotation is not None:
            x = self.rotation @ x
        target = math.sqrt(self.b / self.m)
        out = []
        for t, tree in enumerate(self.trees):
            comps = tree.apply(x[None, :])[0]
            sets = []
            for i, comp in enumerate(comps):
                nrm = np.linalg.norm(comp)
                if nrm == 0 or abs(nrm - target) > self.eps_B:
                    sets = None
                    break
                sets.append(sorted(self.families[t][i].decode(comp / nrm, side)))
            out.append(sets)
        return out

    def decode(self, x, side: str = "update") -> set:
        res = set()
        for tree, sets in zip(self.trees, self.component_sets(x, side)):
            if not sets or any(len(s) == 0 for s in sets):
                continue
            if len(res) + math.prod(len(s) for s in sets) > self.id_cap:
                raise DecodeOverflow(f"spherical tensor decode exceeds {self.id_cap} ids")
            res.update((tree.index, combo) for combo in itertools.product(*sets))
        return res


def sample_sph_tensor_family(m: int, b: int, r: float, c: float, eta_u: float, eta_q: float,
                             eps_B: float, proj: ProjCollection, rng: RngStream,
                             delta_s: float = None, rotate: bool = True,
                             net_cap: int = DEFAULT_NET_CAP) -> SphTensorFamily:
    """Per (tree, leaf) verified families with r' = r(1+8 eps_B), eta' = eta sqrt(b/m)."""
    if c * r < math.sqrt(2) - 1e-12:
        raise InfeasibleParameters(f"the tensored spherical family needs c r >= sqrt 2, got {c * r:.4g}",
                                   stage="spherical")
    scale = math.sqrt(b / m)
    base = SphericalParams(b, min(r * (1 + 8 * eps_B), 1.999), c, eta_u * scale, eta_q * scale,
                           delta_s, net_cap=net_cap)
    trees = list(enumerate_trees(proj))
    fams = [[sample_spherical_family(base, rng.child(f"sph/tree{tr.index}/leaf{i}"))
             for i in range(m // b)] for tr in trees]
    rot = None
    if rotate and m > 1:
        from .core_math import random_rotation
        rot = random_rotation(m, rng.child("sph/rotation"))
    return SphTensorFamily(m, b, r, c, eps_B, base, proj, trees, fams, rot)


def decode_sph_tensor(family: SphTensorFamily, x, side: str = "update") -> set:
    return family.decode(x, side)


# ------------------------------------------------------------ demo index

@dataclass
class SphereIndex:
    family: object  # SphericalFamily or SphTensorFamily
    points: np.ndarray
    buckets: dict
    radius: float   # qualification distance c * r


def build_sphere_index(points, family) -> SphereIndex:
    """Bucket every unit point under its update-side filters."""
    dim = family.params.b if isinstance(family, SphericalFamily) else family.m
    X = as_matrix(points, dim)
    buckets = {}
    for pid, x in enumerate(X):
        for fid in family.decode(x, "update"):
            buckets.setdefault(fid, []).append(pid)
    if isinstance(family, SphericalFamily):
        radius = family.params.c * family.params.r
    else:
        radius = family.c * family.r
    return SphereIndex(family, X, buckets, radius)


def query_sphere_index(index: SphereIndex, q):
    """(point id or None, candidates scanned, false positives)."""
    q = np.asarray(q, dtype=np.float64)
    seen = set()
    fps = 0
    for fid in sorted(index.family.decode(q, "query")):
        for pid in index.buckets.get(fid, ()):
            if pid in seen:
                continue
            seen.add(pid)
            if np.linalg.norm(index.points[pid] - q) <= index.radius:
                return pid, len(seen), fps
            fps += 1
    return None, len(seen), fps
