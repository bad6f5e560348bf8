"""One-sided dimensionality reduction and the top-level index over R^d.

Both stages split R^D into D/D' orthogonal blocks and rescale each block by
sqrt(D/D').  The block energies sum to ||x - y||^2, so for every pair the
smallest rescaled block distance is at most the original distance: a close
pair stays close in at least one block.  Far pairs may become close in some
block; those false positives are removed at query time by checking the
original distance.

Stage 1 uses signs, a normalized Hadamard transform and a row permutation
(cheap for large d); stage 2 uses a dense Haar rotation per stage-1 block.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .ball_lattice import BallLatticeParams
from .config import IndexConfig, resolve_params
from .core_math import (OrthoDecomp, RngStream, as_matrix, as_vector, fwht, is_power_of_two,
                        random_rotation, unit_ball_volume)
from .errors import InfeasibleParameters, InputError
from .splitters import ProjCollection, level_tolerances
from .tensor_index import TensorFamilyParams, build_mid_index, sample_tensor_family

__all__ = [
    "FastJLDecomp",
    "RotationDecomp",
    "sample_stage1",
    "sample_stage2",
    "reduce",
    "pad",
    "TopIndex",
    "TopQueryResult",
    "build_top_index",
    "query_top_index",
    "mid_params_from_record",
    "expected_rows",
    "DEFAULT_ROW_BUDGET",
]


def pad(X, d_pad: int) -> np.ndarray:
    """Append zero coordinates up to d_pad (distances are unchanged)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] == d_pad:
        return X
    out = np.zeros((X.shape[0], d_pad))
    out[:, :X.shape[1]] = X
    return out


@dataclass(frozen=True)
class FastJLDecomp:
    """Rows of P H D grouped into blocks of ``block`` rows.

    D = diag(signs), H is the normalized Hadamard matrix and P reorders rows
    by ``perm`` (row r of the result is row perm[r] of H D).
    """

    signs: np.ndarray
    perm: np.ndarray
    block: int

    def __post_init__(self):
        d = self.signs.shape[0]
        if not is_power_of_two(d):
            raise InputError(f"stage-1 dimension {d} is not a power of two")
        if self.perm.shape != (d,) or self.block < 1 or d % self.block:
            raise InputError("stage-1 permutation or block size does not fit the dimension")

    @property
    def d(self) -> int:
        return self.signs.shape[0]

    @property
    def num_blocks(self) -> int:
        return self.d // self.block

    def apply(self, X) -> np.ndarray:
        """(n, num_blocks, block) unscaled components; one transform per row."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise InputError(f"expected dimension {self.d}, got {X.shape[1]}")
        Y = fwht(X * self.signs)[:, self.perm]
        return Y.reshape(X.shape[0], self.num_blocks, self.block)

    @property
    def matrix(self) -> np.ndarray:
        """Dense d x d matrix (test oracle only)."""
        return self.apply(np.eye(self.d)).reshape(self.d, self.d).T


class RotationDecomp(OrthoDecomp):
    """A Haar rotation whose rows are read as consecutive blocks."""


def sample_stage1(d: int, block: int, rng: RngStream) -> FastJLDecomp:
    if not (is_power_of_two(d) and is_power_of_two(block) and block <= d):
        raise InputError(f"stage-1 needs powers of two with block <= d, got d={d}, block={block}")
    return FastJLDecomp(rng.signs(d), rng.permutation(d), block)


def sample_stage2(d: int, block: int, rng: RngStream) -> RotationDecomp:
    if block < 1 or block > d or d % block:
        raise InputError(f"stage-2 block {block} must divide d={d}")
    return RotationDecomp(random_rotation(d, rng), block)


def reduce(points, decomp) -> np.ndarray:
    """Subproblem datasets: array (num_blocks, n, block) of sqrt(d/d') P_i x."""
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    comps = decomp.apply(X) * math.sqrt(decomp.num_blocks)
    return np.transpose(comps, (1, 0, 2))


# -------------------------------------------------------------- top index

def mid_params_from_record(rec: dict) -> TensorFamilyParams:
    m, b = rec["m"], rec["b"]
    ball = BallLatticeParams.create(b, rec["w"], rec["delta"], rec["N"], rec["max_resamples"])
    eps = level_tolerances(m, b, rec["eps_scale"])
    proj = ProjCollection(m, b, mode=rec["proj_mode"], s=rec["proj_s"], seed=rec["seed"], eps=eps)
    return TensorFamilyParams(m, b, rec["eps_B"], ball, proj, n=max(rec["n"], 2), id_cap=rec["id_cap"])


@dataclass
class TopIndex:
    record: dict
    points: np.ndarray              # original (n, d)
    stage1: FastJLDecomp = None     # None when skipped
    stage2: list = None             # per stage-1 block RotationDecomp, or None when skipped
    mids: list = field(default_factory=list)  # one MidIndex per terminal block
    _cache: dict = field(default_factory=dict, repr=False)

    def stored_views(self):
        """Stage-1 and terminal views of the stored points (computed once)."""
        if "views" not in self._cache:
            self._cache["views"] = (self.stage1_views(self.points), self.terminal_views(self.points))
        return self._cache["views"]

    @property
    def c(self) -> float:
        return self.record["c"]

    @property
    def strict(self) -> bool:
        return self.mids[0].family.params.strict if self.mids else True

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def stage1_views(self, X) -> np.ndarray:
        """(n, k1, m1) rescaled stage-1 components (identity when skipped)."""
        Xp = pad(X, self.record["d_pad"])
        if self.stage1 is None:
            return Xp[:, None, :]
        return self.stage1.apply(Xp) * math.sqrt(self.stage1.num_blocks)

    def terminal_views(self, X) -> np.ndarray:
        """(n, T, m) points as seen by each terminal mid index."""
        Z = self.stage1_views(X)
        if self.stage2 is None:
            return Z
        parts = [(dec.apply(Z[:, i]) * math.sqrt(dec.num_blocks)) for i, dec in enumerate(self.stage2)]
        return np.concatenate(parts, axis=1)

    def terminal_to_stage1(self, t: int) -> int:
        per = 1 if self.stage2 is None else self.stage2[0].num_blocks
        return t // per


DEFAULT_ROW_BUDGET = 30_000_000


def expected_rows(rec: dict, params: TensorFamilyParams) -> float:
    """Expected number of stored (point, filter) rows over all terminal blocks.

    A point lies in a given offset's ball with probability V_b / 3^b, so one
    leaf contributes about N V_b / 3^b cells and a tree the product over leaves.
    """
    per_leaf = params.ball.N * unit_ball_volume(params.b) / 3.0 ** params.b
    blocks = (rec["d_pad"] // rec["m1"]) * (rec["m1"] // rec["m"])
    return rec["n"] * blocks * params.proj.size * per_leaf ** params.parts


def build_top_index(points, c: float, config: IndexConfig = None, rng: RngStream = None,
                    row_budget: float = DEFAULT_ROW_BUDGET) -> TopIndex:
    """Reduce d -> m1 -> m and build one mid index per terminal block.

    Raises InfeasibleParameters before any sampling when the expected number
    of stored rows exceeds ``row_budget``.
    """
    config = config or IndexConfig()
    rng = rng or RngStream(config.seed)
    X = as_matrix(points)
    n, d = X.shape
    rec = resolve_params(config, n, d, c)
    mid_params = mid_params_from_record(rec)
    rec["N"] = mid_params.ball.N
    rec["delta"] = mid_params.ball.delta
    rec["strict"] = mid_params.strict
    est = expected_rows(rec, mid_params)
    if est > row_budget:
        raise InfeasibleParameters(
            f"about {est:.3g} stored filter rows expected, above the budget {row_budget:.3g}; "
            "reduce the number of terminal blocks (raise m or m1) or the trees per block",
            stage="build")

    stage1 = sample_stage1(rec["d_pad"], rec["m1"], rng.child("stage1")) if rec["stage1"] else None
    index = TopIndex(rec, X, stage1, None, [])
    if rec["stage2"]:
        k1 = rec["d_pad"] // rec["m1"]
        index.stage2 = [sample_stage2(rec["m1"], rec["m"], rng.child(f"stage2/{i}")) for i in range(k1)]
    views = index.stored_views()[1]
    for t in range(views.shape[1]):
        fam = sample_tensor_family(mid_params, rng.child(f"mid/{t}"))
        index.mids.append(build_mid_index(views[:, t], fam, c=rec["c_mid"], keep_points=False))
    return index


@dataclass
class TopQueryResult:
    point_id: int = None
    distance: float = math.inf
    candidates: int = 0
    fp_stage1: int = 0
    fp_stage2: int = 0
    fp_mid: int = 0
    filters_probed: int = 0
    blocks_probed: int = 0
    strict: bool = False
    seconds: float = 0.0

    @property
    def found(self) -> bool:
        return self.point_id is not None

    @property
    def false_positives(self) -> int:
        return self.fp_stage1 + self.fp_stage2 + self.fp_mid

    def to_dict(self) -> dict:
        return {"point_id": self.point_id, "distance": self.distance, "candidates": self.candidates,
                "fp_stage1": self.fp_stage1, "fp_stage2": self.fp_stage2, "fp_mid": self.fp_mid,
                "filters_probed": self.filters_probed, "blocks_probed": self.blocks_probed,
                "strict": self.strict, "seconds": self.seconds}


def query_top_index(index: TopIndex, q) -> TopQueryResult:
    """First stored point within the original distance c of q.

    Candidates come from q's filters in every terminal block, in block order.
    A candidate farther than c is a false positive; it is attributed to the
    stage whose rescaled view first made it look close (stage 1 if its
    stage-1 block distance is within c1, else stage 2 if its terminal
    distance is within c_mid, else the mid-level filter).
    """
    t0 = time.perf_counter()
    rec = index.record
    q = as_vector(q, rec["d"])
    res = TopQueryResult(strict=index.strict)
    if index.n == 0:
        res.seconds = time.perf_counter() - t0
        return res
    c = rec["c"]
    qs1 = index.stage1_views(q[None, :])[0]
    qt = index.terminal_views(q[None, :])[0]
    seen = np.zeros(index.n, dtype=bool)
    for t, mid in enumerate(index.mids):
        res.blocks_probed += 1
        rows = mid.family.decode_rows(qt[t][None, :])[0]
        res.filters_probed += rows.shape[0]
        for bucket in mid.buckets_of(rows):
            fresh = bucket[~seen[bucket]]
            if fresh.size == 0:
                continue
            seen[fresh] = True
            dist = np.linalg.norm(index.points[fresh] - q, axis=1)
            hit = np.nonzero(dist <= c)[0]
            stop = hit[0] if hit.size else fresh.size
            res.candidates += int(stop) + (1 if hit.size else 0)
            fps = fresh[:stop]
            if fps.size:
                s1_views, term_views = index.stored_views()
                i1 = index.terminal_to_stage1(t)
                d1 = np.linalg.norm(s1_views[fps, i1] - qs1[i1], axis=1)
                dt = np.linalg.norm(term_views[fps, t] - qt[t], axis=1)
                is1 = rec["stage1"] & (d1 <= rec["c1"])
                is2 = ~is1 & (dt <= rec["c_mid"])
                res.fp_stage1 += int(is1.sum())
                res.fp_stage2 += int(is2.sum())
                res.fp_mid += int((~is1 & ~is2).sum())
            if hit.size:
                res.point_id = int(fresh[hit[0]])
                res.distance = float(dist[hit[0]])
                res.seconds = time.perf_counter() - t0
                return res
    res.seconds = time.perf_counter() - t0
    return res
