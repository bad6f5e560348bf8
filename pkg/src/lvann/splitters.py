"""Signed, column-permuted halving matrices and the trees built from them.

A halving matrix of input dimension d has d/2 rows; row r holds +-1/sqrt(2)
in the two columns i, j with h(i) = 2r and h(j) = 2r + 1.  Its complement
uses the same support with the sign on column j flipped, so stacking the
two gives a d x d orthogonal matrix.  A SplitterTree applies a halving spec
at each internal node: the halving spec itself produces child "0" and its
complement produces child "1".  Leaves of a depth-l tree are the 2^l blocks
of an orthogonal decomposition of R^m into copies of R^b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .core_math import FourwiseSign, OrthoDecomp, PairwisePerm, RngStream, as_vector, is_power_of_two
from .errors import DimensionMismatch, InfeasibleParameters, InputError, NotFound

__all__ = [
    "HalvingSpec",
    "halving_apply",
    "complement_apply",
    "sample_halving",
    "SplitterTree",
    "tree_apply",
    "ProjCollection",
    "find_splitting",
    "enumerate_trees",
    "level_tolerances",
    "DEFAULT_TREE_CAP",
]

DEFAULT_TREE_CAP = 1 << 24
_SQRT_HALF = math.sqrt(0.5)


@dataclass(frozen=True)
class HalvingSpec:
    h: PairwisePerm
    sigma: FourwiseSign

    def __post_init__(self):
        if self.h.k != self.sigma.k:
            raise InputError("h and sigma must share the same field size")
        if self.h.k < 1:
            raise InputError("halving needs input dimension >= 2")

    @property
    def d(self) -> int:
        return self.h.d

    @cached_property
    def pairs(self):
        """(first, second, sign_first, sign_second) column arrays per output row."""
        inv = np.argsort(self.h.table())
        first, second = inv[0::2], inv[1::2]
        s = self.sigma.table().astype(np.float64)
        return first, second, s[first], s[second]

    def matrix(self, complement=False) -> np.ndarray:
        """Dense (d/2) x d matrix; used only as a test oracle."""
        first, second, sf, ss = self.pairs
        A = np.zeros((self.d // 2, self.d))
        rows = np.arange(self.d // 2)
        A[rows, first] = sf * _SQRT_HALF
        A[rows, second] = (-ss if complement else ss) * _SQRT_HALF
        return A

    @classmethod
    def identity(cls, d: int) -> "HalvingSpec":
        """Identity permutation and all-plus signs (handy for examples)."""
        k = int(math.log2(d))
        return cls(PairwisePerm(k, 1, 0), FourwiseSign(k, (0, 0, 0, 0)))


def _check_dim(spec, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != spec.d:
        raise DimensionMismatch(f"expected last dimension {spec.d}, got {X.shape[-1]}")
    return X


def halving_apply(spec: HalvingSpec, x) -> np.ndarray:
    """(sigma_i x_i + sigma_j x_j)/sqrt 2 per bucket; works along the last axis."""
    x = _check_dim(spec, x)
    first, second, sf, ss = spec.pairs
    return (x[..., first] * sf + x[..., second] * ss) * _SQRT_HALF


def complement_apply(spec: HalvingSpec, x) -> np.ndarray:
    """Same buckets as halving_apply with the second entry's sign flipped."""
    x = _check_dim(spec, x)
    first, second, sf, ss = spec.pairs
    return (x[..., first] * sf - x[..., second] * ss) * _SQRT_HALF


def _spec_from_index(k: int, idx: int) -> HalvingSpec:
    d = 1 << k
    a = 1 + idx % (d - 1)
    idx //= d - 1
    b = idx % d
    idx //= d
    coeffs = []
    for _ in range(4):
        coeffs.append(idx % d)
        idx //= d
    return HalvingSpec(PairwisePerm(k, a, b), FourwiseSign(k, tuple(coeffs)))


def _family_size(d: int) -> int:
    return (d - 1) * d * d ** 4


def _random_index(d: int, rng: RngStream) -> int:
    # draw each hash parameter separately; the family size overflows int64 for large d
    a, b, c0, c1, c2, c3 = (int(v) for v in rng.integers([0] * 6, [d - 1] + [d] * 5))
    return a + (d - 1) * (b + d * (c0 + d * (c1 + d * (c2 + d * c3))))


def sample_halving(d: int, rng: RngStream) -> HalvingSpec:
    """Uniformly random halving spec of input dimension d."""
    if not is_power_of_two(d) or d < 2:
        raise InputError(f"halving input dimension must be a power of two >= 2, got {d}")
    return _spec_from_index(int(math.log2(d)), _random_index(d, rng))


def level_tolerances(m: int, b: int, scale: float = 4.0) -> tuple:
    """Per-level tolerance scale/sqrt(output dim of that level), root level first."""
    levels = int(round(math.log2(m // b)))
    return tuple(scale / math.sqrt(m >> (j + 1)) for j in range(levels))


def _node_paths(levels: int):
    """Internal node labels in BFS order: '', '0', '1', '00', ..."""
    out = []
    for j in range(levels):
        for t in range(1 << j):
            out.append(format(t, f"0{j}b") if j else "")
    return out


@dataclass(frozen=True)
class SplitterTree:
    m: int
    b: int
    specs: tuple  # HalvingSpec per internal node, BFS order
    index: int = -1  # position in enumerate_trees order when known

    def __post_init__(self):
        if not (is_power_of_two(self.m) and is_power_of_two(self.b) and self.m % self.b == 0):
            raise InputError(f"tree dims must be powers of two with b | m, got m={self.m}, b={self.b}")
        if len(self.specs) != (1 << self.levels) - 1:
            raise InputError(f"expected {(1 << self.levels) - 1} node specs, got {len(self.specs)}")
        for path, spec in zip(_node_paths(self.levels), self.specs):
            if spec.d != self.m >> len(path):
                raise InputError(f"node '{path}' expects input dim {self.m >> len(path)}, got {spec.d}")

    @property
    def levels(self) -> int:
        return int(round(math.log2(self.m // self.b)))

    @property
    def num_leaves(self) -> int:
        return self.m // self.b

    def apply(self, X) -> np.ndarray:
        """Leaf components, shape (n, 2^l, b) for an (n, m) batch."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[-1] != self.m:
            raise DimensionMismatch(f"expected dimension {self.m}, got {X.shape[-1]}")
        comps = [X]
        pos = 0
        for _ in range(self.levels):
            nxt = []
            for c in comps:
                spec = self.specs[pos]
                pos += 1
                nxt.append(halving_apply(spec, c))
                nxt.append(complement_apply(spec, c))
            comps = nxt
        return np.stack(comps, axis=1)

    def decomp(self) -> OrthoDecomp:
        """The tree as a dense stacked-row decomposition."""
        rows = self.apply(np.eye(self.m))  # (m, leaves, b): column j is P e_j
        return OrthoDecomp(rows.reshape(self.m, self.m).T.copy(), self.b)


def tree_apply(tree: SplitterTree, x) -> list:
    """Leaf components of a single vector in binary-string order."""
    x = as_vector(x, tree.m)
    return list(tree.apply(x[None, :])[0])


@lru_cache(maxsize=4096)
def _full_order(seed: int, path: str, dim: int):
    # visit the family as start + k * step (mod size) with step coprime to size
    rng = RngStream(seed, f"proj/full/{path}")
    size = _family_size(dim)
    start = _random_index(dim, rng)
    step = max(1, _random_index(dim, rng))
    while math.gcd(step, size) != 1:
        step = step + 1 if step + 1 < size else 1
    return start, step


@lru_cache(maxsize=4096)
def _subsample_draws(seed: int, path: str, dim: int, s: int) -> tuple:
    rng = RngStream(seed, f"proj/subsampled/{path}")
    return tuple(_random_index(dim, rng) for _ in range(s))


@dataclass(frozen=True)
class ProjCollection:
    """All (or a seeded sample of) halving specs at every node of a tree.

    ``mode`` is "full" or "subsampled".  In full mode node candidates are the
    whole hash family, visited in a seed-dependent order; in subsampled mode
    each node gets ``s`` seeded random specs.
    """

    m: int
    b: int
    mode: str = "subsampled"
    s: int = 8
    seed: int = 0
    eps: tuple = None
    cap: int = DEFAULT_TREE_CAP

    def __post_init__(self):
        if not (is_power_of_two(self.m) and is_power_of_two(self.b) and self.m % self.b == 0):
            raise InputError(f"collection dims must be powers of two with b | m, got m={self.m}, b={self.b}")
        if self.mode not in ("full", "subsampled"):
            raise InputError(f"unknown collection mode {self.mode!r}")
        if self.mode == "subsampled" and self.s < 1:
            raise InputError("subsampled mode needs s >= 1")
        if self.eps is None:
            object.__setattr__(self, "eps", level_tolerances(self.m, self.b))
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        if len(self.eps) != self.levels:
            raise InputError(f"need {self.levels} per-level tolerances, got {len(self.eps)}")

    @property
    def levels(self) -> int:
        return int(round(math.log2(self.m // self.b)))

    @property
    def node_paths(self) -> list:
        return _node_paths(self.levels)

    def node_choices(self, path: str) -> int:
        if self.mode == "subsampled":
            return self.s
        return _family_size(self.m >> len(path))

    @property
    def size(self) -> int:
        out = 1
        for p in self.node_paths:
            out *= self.node_choices(p)
        return out

    @property
    def certificate(self) -> float:
        """Worst leaf distortion any accepted tree can have."""
        return math.prod(1.0 + e for e in self.eps) - 1.0

    def guarantees(self, eps_B: float) -> bool:
        """Whether some tree provably splits every vector within eps_B."""
        if self.levels == 0:
            return True
        if self.mode != "full":
            return False
        dims_ok = all(e >= t - 1e-12 for e, t in zip(self.eps, level_tolerances(self.m, self.b)))
        return dims_ok and eps_B >= self.certificate

    def candidate(self, path: str, k: int) -> HalvingSpec:
        """The k-th candidate spec at node ``path`` (seed-deterministic)."""
        dim = self.m >> len(path)
        kk = int(math.log2(dim))
        size = self.node_choices(path)
        if not 0 <= k < size:
            raise InputError(f"candidate {k} out of range for node '{path}'")
        if self.mode == "subsampled":
            return _spec_from_index(kk, _subsample_draws(self.seed, path, dim, self.s)[k])
        start, step = _full_order(self.seed, path, dim)
        return _spec_from_index(kk, (start + k * step) % size)

    def tree_at(self, index: int) -> SplitterTree:
        """Tree number ``index`` in mixed radix over the BFS node order."""
        if not 0 <= index < self.size:
            raise InputError(f"tree index {index} out of range")
        specs, rest = [], index
        for p in self.node_paths:
            c = self.node_choices(p)
            specs.append(self.candidate(p, rest % c))
            rest //= c
        return SplitterTree(self.m, self.b, tuple(specs), index)

    def to_dict(self) -> dict:
        return {"m": self.m, "b": self.b, "mode": self.mode, "s": self.s, "seed": self.seed,
                "eps": list(self.eps), "cap": self.cap}


def _ratio_ok(parent, child, eps):
    pn = np.linalg.norm(parent)
    if pn == 0.0:
        return True
    return abs(math.sqrt(2.0) * np.linalg.norm(child) / pn - 1.0) <= eps


def find_splitting(collection: ProjCollection, x, max_scan=None) -> SplitterTree:
    """Greedy top-down search for a tree that splits x near-evenly.

    ``x`` may also be a list of vectors, in which case every node must split
    all of them at once.  Each node takes the first candidate (in the seeded
    order) whose two children both satisfy the level tolerance.
    """
    vecs = [as_vector(v, collection.m) for v in (x if isinstance(x, (list, tuple)) else [x])]
    if any(np.linalg.norm(v) == 0 for v in vecs):
        raise InputError("find_splitting needs nonzero vectors")
    comps = {"": vecs}
    specs, index, radix = [], 0, 1
    for path in collection.node_paths:
        eps = collection.eps[len(path)]
        parents = comps.pop(path)
        limit = collection.node_choices(path)
        if max_scan is not None:
            limit = min(limit, max_scan)
        for k in range(limit):
            spec = collection.candidate(path, k)
            zeros = [halving_apply(spec, p) for p in parents]
            ones = [complement_apply(spec, p) for p in parents]
            if all(_ratio_ok(p, z, eps) and _ratio_ok(p, o, eps) for p, z, o in zip(parents, zeros, ones)):
                break
        else:
            raise NotFound(f"no candidate at node '{path}' splits within {eps:.4g} "
                           f"after scanning {limit} specs ({collection.mode} mode)")
        specs.append(spec)
        index += k * radix
        radix *= collection.node_choices(path)
        comps[path + "0"] = zeros
        comps[path + "1"] = ones
    return SplitterTree(collection.m, collection.b, tuple(specs), index)


def enumerate_trees(collection: ProjCollection):
    """Every tree of the collection, in tree_at order."""
    size = collection.size
    if size > collection.cap:
        raise InfeasibleParameters(
            f"collection has {size:.3g} trees, above the cap {collection.cap}; "
            "use subsampled mode (mode=subsampled, s=...) instead", stage="splitters")
    for i in range(size):
        yield collection.tree_at(i)
