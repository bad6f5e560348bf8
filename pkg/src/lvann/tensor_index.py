"""Tensored ball-lattice filters on R^m and the mid-dimensional index.

For every tree of a ProjCollection a point x is shrunk to x/(1+eps_B),
split into m/b components sqrt(m/b) * P_i x', and each component is decoded
by its own ball-lattice family.  The filters of x under that tree are the
cartesian product of the per-component ball sets; the filters of x overall
are the union over trees.  Two points within distance 1 share a filter
whenever some tree splits their difference within eps_B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ball_lattice import BallFilterId, BallLatticeParams, sample_family
from .core_math import RngStream, as_matrix, as_vector
from .errors import DecodeOverflow, InfeasibleParameters, InputError
from .splitters import ProjCollection, enumerate_trees

__all__ = [
    "TensorFamilyParams",
    "TensorFilterId",
    "TensorFamily",
    "sample_tensor_family",
    "decode_tensor",
    "MidIndex",
    "MidQueryResult",
    "build_mid_index",
    "query_mid_index",
    "set_radius",
    "DEFAULT_ID_CAP",
]

DEFAULT_ID_CAP = 1 << 20


def set_radius(m: int, n: int, c: float) -> float:
    """Ball radius c * sqrt(m / (8 ln n)) for a dataset of n points."""
    if n < 2:
        raise InputError(f"set_radius needs n >= 2, got {n}")
    return c * math.sqrt(m / (8.0 * math.log(n)))


@dataclass(frozen=True)
class TensorFamilyParams:
    m: int
    b: int
    eps_B: float
    ball: BallLatticeParams
    proj: ProjCollection
    n: int = 2
    id_cap: int = DEFAULT_ID_CAP

    def __post_init__(self):
        if self.proj.m != self.m or self.proj.b != self.b:
            raise InputError("projection collection dims do not match the tensor dims")
        if self.ball.b != self.b:
            raise InputError(f"ball family dim {self.ball.b} != subspace dim {self.b}")
        if self.eps_B < 0:
            raise InputError("eps_B must be non-negative")
        if self.proj.mode == "full" and self.proj.levels > 0 and self.eps_B < self.proj.certificate:
            raise InfeasibleParameters(
                f"eps_B={self.eps_B:.4g} is below the splitter certificate "
                f"{self.proj.certificate:.4g}; the full collection cannot guarantee a shared filter",
                stage="tensor_index")

    @property
    def parts(self) -> int:
        return self.m // self.b

    @property
    def strict(self) -> bool:
        """Whether close pairs are guaranteed to share a filter."""
        return self.proj.guarantees(self.eps_B)

    @property
    def row_len(self) -> int:
        return 1 + self.parts * (1 + self.b)


@dataclass(frozen=True, order=True)
class TensorFilterId:
    tree_index: int
    parts: tuple  # BallFilterId per leaf

    def encode(self) -> bytes:
        vals = [self.tree_index]
        for p in self.parts:
            vals.append(p.offset_index)
            vals.extend(p.cell)
        return np.array(vals, dtype="<i4").tobytes()

    @classmethod
    def from_row(cls, row, b: int) -> "TensorFilterId":
        row = [int(v) for v in row]
        parts = []
        for s in range(1, len(row), b + 1):
            parts.append(BallFilterId(row[s], tuple(row[s + 1:s + 1 + b])))
        return cls(row[0], tuple(parts))


@dataclass
class TensorFamily:
    params: TensorFamilyParams
    trees: list
    families: list  # families[t][i]: BallLatticeFamily for leaf i of tree t

    def components(self, X, tree_pos: int) -> np.ndarray:
        """sqrt(m/b) * P_i x/(1+eps_B) for every row and leaf: (n, m/b, b)."""
        p = self.params
        Xs = X / (1.0 + p.eps_B)
        return self.trees[tree_pos].apply(Xs) * math.sqrt(p.parts)

    def decode_rows(self, X, point_ids=None) -> list:
        """Per point, an int64 array of filter rows [tree, off_1, cell_1, ..., off_k, cell_k]."""
        p = self.params
        X = as_matrix(X, p.m)
        n = X.shape[0]
        per_point = [[] for _ in range(n)]
        counts = np.zeros(n, dtype=np.int64)
        for t, tree in enumerate(self.trees):
            comps = self.components(X, t)
            leaf_rows = [self.families[t][i].decode_rows(comps[:, i]) for i in range(p.parts)]
            for k in range(n):
                factors = [leaf_rows[i][k] for i in range(p.parts)]
                size = math.prod(f.shape[0] for f in factors)
                if size == 0:
                    continue
                counts[k] += size
                if counts[k] > p.id_cap:
                    pid = k if point_ids is None else point_ids[k]
                    raise DecodeOverflow(
                        f"point {pid} decodes to more than {p.id_cap} filters; "
                        "raise id_cap or reduce the number of trees/offsets", point_id=pid)
                per_point[k].append(_product_rows(tree.index, factors))
        width = p.row_len
        return [np.concatenate(r) if r else np.zeros((0, width), dtype=np.int64) for r in per_point]

    def decode(self, x) -> set:
        x = as_vector(x, self.params.m)
        rows = self.decode_rows(x[None, :])[0]
        return {TensorFilterId.from_row(r, self.params.b) for r in rows}


def _product_rows(tree_index: int, factors: list) -> np.ndarray:
    """Cartesian product of per-leaf row arrays, prefixed with the tree index."""
    acc = np.full((1, 1), tree_index, dtype=np.int64)
    for f in factors:
        acc = np.concatenate(
            [np.repeat(acc, f.shape[0], axis=0), np.tile(f, (acc.shape[0], 1))], axis=1)
    return acc


def sample_tensor_family(params: TensorFamilyParams, rng: RngStream) -> TensorFamily:
    """One verified ball-lattice family per (tree, leaf), each on its own stream."""
    trees = list(enumerate_trees(params.proj))
    families = []
    for t, tree in enumerate(trees):
        families.append([sample_family(params.ball, rng.child(f"tree{tree.index}/leaf{i}"))
                         for i in range(params.parts)])
    return TensorFamily(params, trees, families)


def decode_tensor(family: TensorFamily, x) -> set:
    """All tensored filter ids containing x."""
    return family.decode(x)


# ------------------------------------------------------------------ index

def _key_view(rows: np.ndarray) -> np.ndarray:
    rows = np.ascontiguousarray(rows, dtype="<i4")
    return rows.view(np.dtype((np.void, rows.shape[1] * 4))).ravel()


@dataclass
class MidIndex:
    """Buckets of point ids keyed by tensored filter rows.

    ``keys`` holds the distinct filter rows (int32) in sorted byte order,
    bucket j is ``ids[indptr[j]:indptr[j+1]]`` with ids sorted ascending.
    """

    family: TensorFamily
    keys: np.ndarray
    indptr: np.ndarray
    ids: np.ndarray
    points: np.ndarray = None
    c: float = 2.0
    _lookup: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype=np.int32).reshape(-1, self.family.params.row_len)
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        kv = _key_view(self.keys)
        self._lookup = {bytes(k): j for j, k in enumerate(kv)}

    @property
    def num_buckets(self) -> int:
        return self.keys.shape[0]

    def bucket(self, row) -> np.ndarray:
        j = self._lookup.get(np.asarray(row, dtype="<i4").tobytes())
        if j is None:
            return self.ids[:0]
        return self.ids[self.indptr[j]:self.indptr[j + 1]]

    def buckets_of(self, rows: np.ndarray):
        """Yield the bucket for each filter row (skipping empty ones)."""
        for kb in _key_view(rows):
            j = self._lookup.get(bytes(kb))
            if j is not None:
                yield self.ids[self.indptr[j]:self.indptr[j + 1]]


def _group(rows_per_point: list, ids) -> tuple:
    width = None
    all_rows, owners = [], []
    for pid, rows in zip(ids, rows_per_point):
        width = rows.shape[1]
        all_rows.append(rows)
        owners.append(np.full(rows.shape[0], pid, dtype=np.int64))
    if not all_rows or sum(r.shape[0] for r in all_rows) == 0:
        return None
    R = np.concatenate(all_rows).astype(np.int32)
    owners = np.concatenate(owners)
    uniq, inverse = np.unique(_key_view(R), return_inverse=True)
    inverse = inverse.ravel()
    order = np.lexsort((owners, inverse))
    keys = np.frombuffer(uniq.tobytes(), dtype="<i4").reshape(-1, width)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(inverse, minlength=uniq.shape[0]))])
    return keys, indptr, owners[order]


def build_mid_index(points, params_or_family, rng: RngStream = None, c: float = 2.0,
                    keep_points: bool = True) -> MidIndex:
    """Decode every point and bucket its row number under each of its filters."""
    if isinstance(params_or_family, TensorFamily):
        family = params_or_family
    else:
        if rng is None:
            raise InputError("sampling a family needs an RngStream")
        family = sample_tensor_family(params_or_family, rng)
    p = family.params
    X = np.zeros((0, p.m)) if len(points) == 0 else as_matrix(points, p.m)
    ids = np.arange(X.shape[0])
    rows = family.decode_rows(X, point_ids=ids) if X.shape[0] else []
    grouped = _group(rows, ids)
    if grouped is None:
        keys = np.zeros((0, p.row_len), dtype=np.int32)
        indptr, bucket_ids = np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    else:
        keys, indptr, bucket_ids = grouped
    return MidIndex(family, keys, indptr, bucket_ids, X if keep_points else None, c)


@dataclass
class MidQueryResult:
    point_id: int = None
    distance: float = math.inf
    candidates: int = 0
    false_positives: int = 0
    filters_probed: int = 0

    @property
    def found(self) -> bool:
        return self.point_id is not None


def query_mid_index(index: MidIndex, q, c: float = None) -> MidQueryResult:
    """First stored point within distance c of q among q's filter buckets."""
    if index.points is None:
        raise InputError("this index was built without stored points")
    c = index.c if c is None else c
    q = as_vector(q, index.family.params.m)
    rows = index.family.decode_rows(q[None, :])[0]
    res = MidQueryResult(filters_probed=rows.shape[0])
    seen = set()
    for bucket in index.buckets_of(rows):
        for pid in bucket.tolist():
            if pid in seen:
                continue
            seen.add(pid)
            res.candidates += 1
            dist = float(np.linalg.norm(index.points[pid] - q))
            if dist <= c:
                res.point_id, res.distance = pid, dist
                return res
            res.false_positives += 1
    return res
