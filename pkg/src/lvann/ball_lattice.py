"""Shifted ball-lattice filters for R^b with net verification.

A family is N random offsets v_i in [0, 3w)^b.  Offset i contributes the
balls of radius w centred on v_i + 3w * Z^b, which are pairwise disjoint, so
a point lies in at most one ball per offset.  After sampling, the family is
checked on a delta-spaced net with the shrunken radius
w' = w - delta * sqrt(b) / 2; passing the check means every pair of points
at distance <= 1 shares at least one ball.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core_math import RngStream, as_matrix, as_vector, relative_cap_volume, unit_ball_volume
from .errors import InfeasibleParameters, InputError, VerificationFailure

__all__ = [
    "BallLatticeParams",
    "BallFilterId",
    "BallLatticeFamily",
    "default_delta",
    "success_prob_lower_bound",
    "required_offsets",
    "sample_family",
    "verify_family",
    "decode",
    "collision_prob_upper_bound",
    "net_summary",
    "DEFAULT_MAX_NET_PAIRS",
]

DEFAULT_MAX_NET_PAIRS = 20_000_000
_CODE_BASE = 16
_CODE_SHIFT = 8


def default_delta(b: int, w: float) -> float:
    """min(1/b, 2w/(3 sqrt b)), nudged down so that 3w/delta is an integer.

    With an integral period the net is invariant under the lattice shifts and
    the check covers all of R^b rather than a bounded box.
    """
    base = min(1.0 / b, 2.0 * w / (3.0 * math.sqrt(b)))
    steps = math.ceil(3.0 * w / base - 1e-9)
    return 3.0 * w / steps


@dataclass(frozen=True)
class BallLatticeParams:
    b: int
    w: float
    delta: float
    N: int
    max_resamples: int = 16

    def __post_init__(self):
        if self.b < 1 or int(self.b) != self.b:
            raise InputError(f"b must be a positive integer, got {self.b}")
        if not (self.w > 0 and self.delta > 0):
            raise InputError("w and delta must be positive")
        if self.N < 0:
            raise InputError("N must be non-negative")
        if self.max_resamples < 1:
            raise InputError("max_resamples must be positive")
        if self.shrunk_radius <= 0:
            raise InfeasibleParameters(
                f"shrunken radius w' = {self.shrunk_radius:.4g} <= 0 "
                f"(w={self.w}, delta={self.delta}, b={self.b})", stage="ball_lattice")

    @property
    def shrunk_radius(self) -> float:
        return self.w - 0.5 * self.delta * math.sqrt(self.b)

    @property
    def period(self) -> float:
        return 3.0 * self.w

    @classmethod
    def create(cls, b, w, delta=None, N=None, max_resamples=16) -> "BallLatticeParams":
        """Fill in delta and N from their defaults when not given."""
        if delta is None:
            delta = default_delta(b, w)
        if N is None:
            probe = cls(b, w, delta, 0, max_resamples)
            N = required_offsets(probe)
        return cls(int(b), float(w), float(delta), int(N), int(max_resamples))

    def to_dict(self) -> dict:
        return {"b": self.b, "w": self.w, "delta": self.delta, "N": self.N,
                "max_resamples": self.max_resamples}


@dataclass(frozen=True, order=True)
class BallFilterId:
    offset_index: int
    cell: tuple

    def encode(self) -> bytes:
        return np.array((self.offset_index,) + tuple(self.cell), dtype="<i4").tobytes()


def success_prob_lower_bound(params: BallLatticeParams) -> float:
    """Lower bound on the chance one random offset covers a close net pair.

    ``(w'/(3w))^b * V_b * 2 I_b(xi)`` with ``xi = (1 + delta sqrt b) / (2 w')``;
    zero when xi > 1 since no radius-w' ball can hold such a pair.
    """
    b, w, wp = params.b, params.w, params.shrunk_radius
    xi = (1.0 + params.delta * math.sqrt(b)) / (2.0 * wp)
    if xi > 1.0:
        return 0.0
    return (wp / (3.0 * w)) ** b * unit_ball_volume(b) * 2.0 * relative_cap_volume(b, xi)


def required_offsets(params: BallLatticeParams, p_lb=None) -> int:
    """Offsets needed for the union bound over net pairs to leave failure <= 1/2."""
    if p_lb is None:
        p_lb = success_prob_lower_bound(params)
    if p_lb <= 0:
        raise InfeasibleParameters(
            "success probability lower bound is 0; no radius-w' ball holds a close "
            f"net pair (b={params.b}, w={params.w}, delta={params.delta})", stage="ball_lattice")
    b = params.b
    return math.ceil((2 * b * math.log(6.0 * params.w / params.delta) + math.log(2.0)) / p_lb)


def collision_prob_upper_bound(params, t: float) -> float:
    """V_b 3^-b exp(-(b/2) t^2 / (4 w^2)): per-offset chance of sharing a ball."""
    if t < 0:
        raise InputError("distance must be non-negative")
    b, w = params.b, params.w
    return unit_ball_volume(b) * 3.0 ** (-b) * math.exp(-0.5 * b * t * t / (4.0 * w * w))


# ------------------------------------------------------------------- net

@dataclass(frozen=True)
class _Net:
    points: np.ndarray      # (P, b) net coordinates
    first: np.ndarray       # (Q,) index of x in points
    second: np.ndarray      # (Q,) index of the representative of y
    shift_code: np.ndarray  # (Q,) code of the lattice shift from the representative to y
    disp: np.ndarray        # (Q,) index into displacements
    displacements: np.ndarray  # (D, b) integer steps
    periodic: bool


def _displacements(b: int, delta: float) -> np.ndarray:
    reach = 1.0 + delta * math.sqrt(b)
    steps = int(math.floor(reach / delta + 1e-9))
    rng = range(-steps, steps + 1)
    out = []
    for j in itertools.product(rng, repeat=b):
        if sum(c * c for c in j) * delta * delta > reach * reach * (1 + 1e-12):
            continue
        # one representative per unordered pair: j >= 0 lexicographically
        if j < (0,) * b:
            continue
        out.append(j)
    return np.array(out, dtype=np.int64).reshape(-1, b)


def _is_periodic(w: float, delta: float):
    ratio = 3.0 * w / delta
    m = round(ratio)
    return m >= 1 and abs(ratio - m) <= 1e-9 * max(1.0, ratio), int(m)


def net_summary(params: BallLatticeParams) -> dict:
    """Sizes of the verification net without materializing it."""
    periodic, M = _is_periodic(params.w, params.delta)
    per_axis = M if periodic else int(math.floor(6.0 * params.w / params.delta + 1e-9)) + 1
    reach = 1.0 + params.delta * math.sqrt(params.b)
    steps = reach / params.delta
    ndisp = 0.5 * unit_ball_volume(params.b) * (steps + 0.5 * math.sqrt(params.b)) ** params.b + 1
    return {
        "periodic": periodic,
        "net_points": per_axis ** params.b,
        "pairs_estimate": int(per_axis ** params.b * ndisp),
    }


@lru_cache(maxsize=32)
def _build_net(b: int, w: float, delta: float, max_pairs: int) -> _Net:
    params_est = net_summary(BallLatticeParams(b, w, delta, 0))
    if params_est["pairs_estimate"] > max_pairs:
        raise InfeasibleParameters(
            f"verification net too large: ~{params_est['pairs_estimate']:.3g} pairs over "
            f"{params_est['net_points']:.3g} net points exceeds cap {max_pairs:.3g} "
            f"(b={b}, w={w}, delta={delta:.4g})", stage="ball_lattice")
    periodic, M = _is_periodic(w, delta)
    disps = _displacements(b, delta)
    if periodic:
        per_axis = M
    else:
        per_axis = int(math.floor(6.0 * w / delta + 1e-9)) + 1
    grid = np.stack(np.meshgrid(*([np.arange(per_axis)] * b), indexing="ij"), -1).reshape(-1, b)
    strides = per_axis ** np.arange(b - 1, -1, -1)
    firsts, seconds, codes, dids = [], [], [], []
    pow_ = _CODE_BASE ** np.arange(b, dtype=np.int64)
    for di, j in enumerate(disps):
        y = grid + j
        if periodic:
            shift = np.floor_divide(y, M)
            y = y - shift * M
            idx = np.arange(grid.shape[0])
            code = shift @ pow_
        else:
            ok = np.all((y >= 0) & (y < per_axis), axis=1)
            idx = np.nonzero(ok)[0]
            y = y[ok]
            code = np.zeros(idx.shape[0], dtype=np.int64)
        firsts.append(idx)
        seconds.append(y @ strides)
        codes.append(code)
        dids.append(np.full(idx.shape[0], di, dtype=np.int32))
    return _Net(
        points=grid.astype(np.float64) * delta,
        first=np.concatenate(firsts),
        second=np.concatenate(seconds),
        shift_code=np.concatenate(codes),
        disp=np.concatenate(dids),
        displacements=disps,
        periodic=periodic,
    )


# ---------------------------------------------------------------- family

@dataclass
class BallLatticeFamily:
    params: BallLatticeParams
    offsets: np.ndarray
    verified: bool = False
    attempts: int = 0
    _: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, self.params.b)
        if self.offsets.shape[0] != self.params.N:
            raise InputError(f"expected {self.params.N} offsets, got {self.offsets.shape[0]}")
        if self.offsets.size and (self.offsets.min() < 0 or self.offsets.max() >= self.params.period):
            raise InputError("offset coordinates must lie in [0, 3w)")

    def locate(self, X, radius=None):
        """For each row of X and each offset: nearest centre cell and membership.

        Returns ``(inside, cells)`` with shapes (n, N) and (n, N, b).
        """
        X = np.atleast_2d(X)
        period = self.params.period
        r = self.params.w if radius is None else radius
        diff = X[:, None, :] - self.offsets[None, :, :]
        cells = np.rint(diff / period)
        res = diff - period * cells
        inside = np.einsum("ijk,ijk->ij", res, res) <= r * r
        return inside, cells.astype(np.int64)

    def decode(self, x) -> set:
        x = as_vector(x, self.params.b)
        inside, cells = self.locate(x[None, :])
        return {BallFilterId(int(i), tuple(int(c) for c in cells[0, i]))
                for i in np.nonzero(inside[0])[0]}

    def decode_rows(self, X) -> list:
        """Per point, an int array of rows (offset_index, cell...) in offset order."""
        X = as_matrix(X, self.params.b)
        out = []
        chunk = max(1, 4_000_000 // max(1, self.params.N * self.params.b))
        for s in range(0, X.shape[0], chunk):
            inside, cells = self.locate(X[s:s + chunk])
            for k in range(inside.shape[0]):
                idx = np.nonzero(inside[k])[0]
                out.append(np.column_stack((idx, cells[k, idx])).astype(np.int64))
        return out


def decode(family: BallLatticeFamily, x) -> set:
    """Set of balls (one per offset at most) that contain x."""
    return family.decode(x)


def _check(family: BallLatticeFamily, max_pairs=DEFAULT_MAX_NET_PAIRS):
    p = family.params
    net = _build_net(p.b, p.w, p.delta, max_pairs)
    pow_ = _CODE_BASE ** np.arange(p.b, dtype=np.int64)
    remaining = np.arange(net.first.shape[0])
    wp = p.shrunk_radius
    for i in range(p.N):
        if remaining.size == 0:
            break
        v = family.offsets[i]
        diff = net.points - v
        cells = np.rint(diff / p.period)
        res = diff - p.period * cells
        inside = np.einsum("ij,ij->i", res, res) <= wp * wp
        code = (cells.astype(np.int64) + _CODE_SHIFT) @ pow_
        fx = net.first[remaining]
        sy = net.second[remaining]
        ok = inside[fx] & inside[sy] & (code[fx] == code[sy] + net.shift_code[remaining])
        remaining = remaining[~ok]
    if remaining.size == 0:
        return True, None
    q = remaining[0]
    x = net.points[net.first[q]]
    y = x + p.delta * net.displacements[net.disp[q]]
    return False, (x, y)


def verify_family(family: BallLatticeFamily, max_pairs=DEFAULT_MAX_NET_PAIRS) -> bool:
    """True iff every close net pair fits in one radius-w' ball of the family."""
    ok, _ = _check(family, max_pairs)
    return ok


def sample_family(params: BallLatticeParams, rng: RngStream,
                  max_pairs=DEFAULT_MAX_NET_PAIRS) -> BallLatticeFamily:
    """Draw offsets until the net check passes (at most max_resamples times)."""
    # Build (and size-check) the net before spending any draws.
    _build_net(params.b, params.w, params.delta, max_pairs)
    failing = None
    for attempt in range(1, params.max_resamples + 1):
        offsets = rng.uniform(0.0, params.period, (params.N, params.b))
        # uniform() can round up to the open endpoint
        offsets = np.where(offsets >= params.period, 0.0, offsets)
        fam = BallLatticeFamily(params, offsets, attempts=attempt)
        ok, failing = _check(fam, max_pairs)
        if ok:
            fam.verified = True
            return fam
    x, y = failing
    raise VerificationFailure(
        f"no verified family after {params.max_resamples} attempts; last failing net pair "
        f"x={np.round(x, 6).tolist()} y={np.round(y, 6).tolist()}", failing_pair=failing)
