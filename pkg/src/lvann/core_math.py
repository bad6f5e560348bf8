"""Numeric primitives shared by the filter families and the index.

Ball and cap volumes, Gaussian tail/orthant probabilities, the normalized
Walsh-Hadamard transform, GF(2^k) hash families, seeded random streams and
the dense orthogonal-decomposition type.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .errors import DimensionMismatch, InputError

__all__ = [
    "as_vector",
    "as_matrix",
    "is_power_of_two",
    "next_power_of_two",
    "unit_ball_volume",
    "relative_cap_volume",
    "gaussian_tail",
    "gaussian_tail_inverse",
    "gaussian_orthant",
    "fwht",
    "gf_mul",
    "gf_poly",
    "PairwisePerm",
    "FourwiseSign",
    "RngStream",
    "random_rotation",
    "OrthoDecomp",
    "apply_decomp",
]


def as_vector(x, dim=None) -> np.ndarray:
    """Validate a point: 1-D, finite float64, optionally of a given dim."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InputError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InputError("vector has NaN or infinite coordinates")
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {v.shape[0]}")
    return v


def as_matrix(X, dim=None) -> np.ndarray:
    """Validate a batch of points stored row-wise."""
    M = np.asarray(X, dtype=np.float64)
    if M.ndim == 1 and dim is not None and M.size == 0:
        M = M.reshape(0, dim)
    if M.ndim != 2:
        raise InputError(f"expected a 2-D array of points, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InputError("points have NaN or infinite coordinates")
    if dim is not None and M.shape[1] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {M.shape[1]}")
    return M


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    if n < 1:
        raise InputError("dimension must be positive")
    return 1 << (int(n) - 1).bit_length()


# ---------------------------------------------------------------- volumes

def unit_ball_volume(b: int) -> float:
    """Volume of the unit ball in R^b, pi^(b/2) / Gamma(b/2 + 1)."""
    if int(b) != b or b < 1:
        raise InputError(f"dimension must be a positive integer, got {b}")
    return math.exp(0.5 * b * math.log(math.pi) - special.gammaln(0.5 * b + 1.0))


def relative_cap_volume(b: int, u: float) -> float:
    """Fraction of the unit b-ball lying beyond the hyperplane at distance u.

    Uses the regularized incomplete beta form
    ``0.5 * I(1 - u^2; (b + 1) / 2, 1 / 2)``.
    """
    if int(b) != b or b < 1:
        raise InputError(f"dimension must be a positive integer, got {b}")
    if not (0.0 <= u <= 1.0):
        raise InputError(f"cap distance must lie in [0, 1], got {u}")
    return 0.5 * float(special.betainc(0.5 * (b + 1), 0.5, 1.0 - u * u))


# ----------------------------------------------------------- gaussian bits

def gaussian_tail(eta):
    """P(Z >= eta) for a standard normal Z."""
    if np.ndim(eta):
        return 0.5 * special.erfc(np.asarray(eta, dtype=np.float64) / math.sqrt(2.0))
    return 0.5 * math.erfc(eta / math.sqrt(2.0))


def gaussian_tail_inverse(p):
    """The eta with gaussian_tail(eta) == p."""
    return math.sqrt(2.0) * float(special.erfcinv(2.0 * p))


def _cos_sin(s: float):
    alpha = 1.0 - 0.5 * s * s
    beta = math.sqrt(max(0.0, 1.0 - alpha * alpha))
    return alpha, beta


def gaussian_orthant(s: float, eta_u: float, eta_q: float, tol: float = 1e-10) -> float:
    """P(<z,u> >= eta_u and <z,q> >= eta_q) for unit u, q at distance s.

    Integrates the density of <z,u> against the conditional tail of <z,q>;
    ``tol`` is a relative tolerance, so tiny probabilities stay accurate.
    """
    if not (0.0 < s < 2.0):
        raise InputError(f"distance on the unit sphere must lie in (0, 2), got {s}")
    alpha, beta = _cos_sin(s)
    inv_sqrt2pi = 1.0 / math.sqrt(2.0 * math.pi)

    def integrand(t):
        return inv_sqrt2pi * math.exp(-0.5 * t * t) * \
            0.5 * math.erfc((eta_q - alpha * t) / (beta * math.sqrt(2.0)))

    # The normal density is below 1e-300 outside [-38, 38].
    lo, hi = max(float(eta_u), -38.0), 38.0
    if lo >= hi:
        return 0.0
    # Break at the conditional threshold so quad sees the step when beta is small.
    knots = [lo, hi]
    if alpha != 0.0 and lo < eta_q / alpha < hi:
        knots.insert(1, eta_q / alpha)
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        val, _ = integrate.quad(integrand, a, b, epsabs=0.0, epsrel=tol, limit=400)
        total += val
    return float(total)


# ------------------------------------------------------------------- FWHT

def fwht(x) -> np.ndarray:
    """Normalized Walsh-Hadamard transform along the last axis.

    Returns ``H_d x / sqrt(d)``; the map is orthogonal and its own inverse.
    """
    a = np.array(x, dtype=np.float64, copy=True)
    d = a.shape[-1]
    if not is_power_of_two(d):
        raise InputError(f"FWHT needs a power-of-two length, got {d}")
    lead = a.shape[:-1]
    h = 1
    while h < d:
        a = a.reshape(lead + (d // (2 * h), 2, h))
        top = a[..., 0, :] + a[..., 1, :]
        bot = a[..., 0, :] - a[..., 1, :]
        a = np.stack((top, bot), axis=-2)
        h *= 2
    return a.reshape(lead + (d,)) / math.sqrt(d)


# --------------------------------------------------------------- GF(2^k)

# Irreducible polynomials (with the leading bit) indexed by field degree.
_GF_POLY = {
    1: 0b11,
    2: 0b111,
    3: 0b1011,
    4: 0b10011,
    5: 0b100101,
    6: 0b1000011,
    7: 0b10000011,
    8: 0b100011011,
    9: 0b1000010001,
    10: 0b10000001001,
    11: 0b100000000101,
    12: 0b1000001010011,
    13: 0b10000000011011,
    14: 0b100010001000011,
    15: 0b1000000000000011,
    16: 0b10001000000001011,
}


def gf_poly(k: int) -> int:
    if k not in _GF_POLY:
        raise InputError(f"GF(2^{k}) not supported (k must be 1..16)")
    return _GF_POLY[k]


def gf_mul(a, b, k: int):
    """Multiply elementwise in GF(2^k). Works on ints or integer arrays."""
    poly = gf_poly(k)
    top = 1 << k
    a = np.asarray(a, dtype=np.int64).copy()
    b = np.asarray(b, dtype=np.int64).copy()
    a, b = np.broadcast_arrays(a, b)
    a = a.copy()
    b = b.copy()
    out = np.zeros_like(a)
    for _ in range(k):
        out ^= np.where(b & 1, a, 0)
        b >>= 1
        a <<= 1
        a = np.where(a & top, a ^ poly, a)
    return out if out.ndim else int(out)


@dataclass(frozen=True)
class PairwisePerm:
    """x -> a*x + b over GF(2^k), a permutation of [2^k] when a != 0."""

    k: int
    a: int
    b: int

    def __post_init__(self):
        d = 1 << self.k
        if not (1 <= self.a < d and 0 <= self.b < d):
            raise InputError("PairwisePerm needs a in [1, d) and b in [0, d)")

    @property
    def d(self) -> int:
        return 1 << self.k

    def table(self) -> np.ndarray:
        return gf_mul(self.a, np.arange(self.d), self.k) ^ self.b

    def __call__(self, x):
        return gf_mul(self.a, x, self.k) ^ self.b


@dataclass(frozen=True)
class FourwiseSign:
    """Lowest output bit of a cubic over GF(2^k), mapped to +1/-1."""

    k: int
    coeffs: tuple  # (c0, c1, c2, c3)

    def __post_init__(self):
        d = 1 << self.k
        if len(self.coeffs) != 4 or not all(0 <= c < d for c in self.coeffs):
            raise InputError("FourwiseSign needs four coefficients in [0, d)")

    @property
    def d(self) -> int:
        return 1 << self.k

    def __call__(self, x):
        c0, c1, c2, c3 = self.coeffs
        v = gf_mul(c3, x, self.k) ^ c2
        v = gf_mul(v, x, self.k) ^ c1
        v = gf_mul(v, x, self.k) ^ c0
        return 1 - 2 * (np.asarray(v) & 1)

    def table(self) -> np.ndarray:
        return self(np.arange(self.d)).astype(np.int64)


# ----------------------------------------------------------- randomness

def _stream_key(seed: int, label: str) -> np.ndarray:
    h = hashlib.blake2b(f"{int(seed)}\x00{label}".encode(), digest_size=16).digest()
    return np.frombuffer(h, dtype="<u8").copy()


@dataclass
class RngStream:
    """Labelled counter-based random stream.

    The Philox key is a hash of (seed, label), so the draws depend only on
    those two values and on the sequence of calls made on this stream;
    ``counter`` records how many calls were made.  Child streams never share
    state with their parent.
    """

    seed: int
    label: str = "root"
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = np.random.Generator(np.random.Philox(key=_stream_key(self.seed, self.label)))

    def child(self, label) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}")

    @property
    def generator(self) -> np.random.Generator:
        self.counter += 1
        return self._gen

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def signs(self, n):
        return np.where(self.generator.integers(0, 2, n) == 1, 1.0, -1.0)


# ---------------------------------------------------- orthogonal maps

def random_rotation(d: int, rng: RngStream) -> np.ndarray:
    """Haar-distributed orthogonal d x d matrix via QR with sign correction."""
    if d < 1:
        raise InputError("rotation dimension must be positive")
    G = rng.normal((d, d))
    Q, R = np.linalg.qr(G)
    diag = np.sign(np.diag(R))
    diag[diag == 0] = 1.0
    return Q * diag[None, :]


@dataclass(frozen=True)
class OrthoDecomp:
    """Stacked orthonormal rows, read as d / d' consecutive blocks of d' rows."""

    matrix: np.ndarray
    block: int

    def __post_init__(self):
        d = self.matrix.shape[1]
        if self.matrix.shape != (d, d):
            raise InputError("decomposition matrix must be square")
        if self.block < 1 or d % self.block:
            raise InputError(f"block size {self.block} does not divide {d}")

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @property
    def num_blocks(self) -> int:
        return self.d // self.block

    @property
    def blocks(self):
        return [self.matrix[i * self.block:(i + 1) * self.block] for i in range(self.num_blocks)]

    def apply(self, X) -> np.ndarray:
        """Components of each row of X: shape (n, num_blocks, block)."""
        X = np.atleast_2d(X)
        Y = X @ self.matrix.T
        return Y.reshape(X.shape[0], self.num_blocks, self.block)

    @classmethod
    def identity(cls, d: int, block: int) -> "OrthoDecomp":
        return cls(np.eye(d), block)


def apply_decomp(decomp, x) -> list:
    """[P_i x for each block] as a list of vectors."""
    x = as_vector(x, decomp.d)
    return list(decomp.apply(x[None, :])[0])
