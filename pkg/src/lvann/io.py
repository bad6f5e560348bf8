"""Vector files (fvecs, CSV) and the binary index format.

Index layout, all integers little-endian:

    b"LVANN"                     magic
    u32 version                  FORMAT_VERSION
    u64 len, bytes               JSON parameter record (sorted keys, compact)
    u8 has_stage1                then i8[d_pad] signs, u32[d_pad] permutation
    u8 has_stage2                then u32 count, count * f64[m1*m1] matrices (row-major)
    u32 blocks                   then per terminal block:
        f64[trees*parts*N*b]     ball-lattice offsets, tree-major then leaf
        u64 K, i32[K*row_len]    bucket keys
        i64[K+1]                 bucket offsets into ids
        i64[len]                 bucket ids
    u64 n, u32 d, f64[n*d]       original points

Loading rebuilds the splitter trees from the recorded collection settings,
so a save/load/save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import struct

import numpy as np

from .ball_lattice import BallLatticeFamily
from .errors import DimensionMismatch, InputError, MalformedHeader, MalformedRecord, VersionMismatch

__all__ = [
    "FORMAT_VERSION",
    "load_fvecs",
    "save_fvecs",
    "load_csv",
    "save_csv",
    "load_vectors",
    "index_to_bytes",
    "index_from_bytes",
    "save_index",
    "load_index",
]

MAGIC = b"LVANN"
FORMAT_VERSION = 1


# ------------------------------------------------------------ vectors

def load_fvecs(path) -> np.ndarray:
    """Read an .fvecs file; every record must repeat the first record's dim."""
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if len(raw) == 0:
        return np.zeros((0, 0), dtype=np.float32)
    if len(raw) < 4:
        raise MalformedHeader(f"{path}: truncated dimension header in record 0")
    dim = struct.unpack_from("<i", raw, 0)[0]
    if dim <= 0:
        raise MalformedHeader(f"{path}: record 0 declares non-positive dimension {dim}")
    rec = 4 + 4 * dim
    if len(raw) % rec == 0:
        table = np.frombuffer(raw, dtype="<i4").reshape(-1, dim + 1)
        bad = np.nonzero(table[:, 0] != dim)[0]
        if bad.size == 0:
            return np.frombuffer(raw, dtype="<f4").reshape(-1, dim + 1)[:, 1:].astype(np.float32)
    # slow path: walk the records to name the first bad one
    pos, k = 0, 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise MalformedHeader(f"{path}: truncated dimension header in record {k}")
        dk = struct.unpack_from("<i", raw, pos)[0]
        if dk != dim:
            raise DimensionMismatch(f"{path}: record {k} has dimension {dk}, expected {dim}")
        if pos + rec > len(raw):
            raise MalformedRecord(f"{path}: record {k} is truncated", record=k)
        pos += rec
        k += 1
    raise MalformedRecord(f"{path}: inconsistent record layout")  # pragma: no cover


def save_fvecs(path, X) -> None:
    X = np.atleast_2d(np.asarray(X, dtype="<f4"))
    out = np.empty((X.shape[0], X.shape[1] + 1), dtype="<f4")
    out[:, 1:] = X
    out[:, 0] = np.array([X.shape[1]], dtype="<i4").view("<f4")[0]
    with open(path, "wb") as fh:
        fh.write(out.tobytes())


def load_csv(path) -> np.ndarray:
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), 1):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    vals = [float(c) for c in row]
                except ValueError:
                    raise MalformedRecord(f"{path}: line {lineno} is not numeric", record=lineno) from None
                if rows and len(vals) != len(rows[0]):
                    raise DimensionMismatch(
                        f"{path}: line {lineno} has {len(vals)} values, expected {len(rows[0])}")
                rows.append(vals)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def save_csv(path, X) -> None:
    np.savetxt(path, np.atleast_2d(X), delimiter=",", fmt="%.9g")


def load_vectors(path) -> np.ndarray:
    """Dispatch on extension: .fvecs or CSV."""
    X = load_fvecs(path) if str(path).endswith(".fvecs") else load_csv(path)
    if X.size and not np.all(np.isfinite(X)):
        raise InputError(f"{path}: non-finite coordinates")
    return X.astype(np.float64)


# -------------------------------------------------------------- index

def _record_json(rec: dict) -> bytes:
    return json.dumps(rec, sort_keys=True, separators=(",", ":")).encode("utf-8")


def index_to_bytes(index) -> bytes:
    rec = dict(index.record)
    buf = io.BytesIO()
    w = buf.write
    w(MAGIC)
    w(struct.pack("<I", FORMAT_VERSION))
    js = _record_json(rec)
    w(struct.pack("<Q", len(js)))
    w(js)
    if index.stage1 is not None:
        w(b"\x01")
        w(np.asarray(index.stage1.signs, dtype="<i1").tobytes())
        w(np.asarray(index.stage1.perm, dtype="<u4").tobytes())
    else:
        w(b"\x00")
    if index.stage2 is not None:
        w(b"\x01")
        w(struct.pack("<I", len(index.stage2)))
        for dec in index.stage2:
            w(np.ascontiguousarray(dec.matrix, dtype="<f8").tobytes())
    else:
        w(b"\x00")
    w(struct.pack("<I", len(index.mids)))
    for mid in index.mids:
        for leaves in mid.family.families:
            for fam in leaves:
                w(np.ascontiguousarray(fam.offsets, dtype="<f8").tobytes())
        w(struct.pack("<Q", mid.keys.shape[0]))
        w(np.ascontiguousarray(mid.keys, dtype="<i4").tobytes())
        w(np.ascontiguousarray(mid.indptr, dtype="<i8").tobytes())
        w(np.ascontiguousarray(mid.ids, dtype="<i8").tobytes())
    n, d = index.points.shape
    w(struct.pack("<QI", n, d))
    w(np.ascontiguousarray(index.points, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.data):
            raise MalformedRecord(f"index file truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def index_from_bytes(data: bytes):
    from .dim_reduction import FastJLDecomp, RotationDecomp, TopIndex, mid_params_from_record
    from .splitters import enumerate_trees
    from .tensor_index import MidIndex, TensorFamily

    rd = _Reader(data)
    if rd.take(len(MAGIC)) != MAGIC:
        raise MalformedHeader("not an index file (bad magic bytes)")
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"index format version {version}, this build reads {FORMAT_VERSION}")
    (jlen,) = rd.unpack("<Q")
    try:
        rec = json.loads(rd.take(jlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"index parameter record is not valid JSON: {exc}") from None
    d_pad, m1, m = rec["d_pad"], rec["m1"], rec["m"]
    stage1 = None
    if rd.take(1) == b"\x01":
        signs = rd.array("<i1", d_pad).astype(np.float64)
        perm = rd.array("<u4", d_pad).astype(np.int64)
        stage1 = FastJLDecomp(signs, perm, m1)
    stage2 = None
    if rd.take(1) == b"\x01":
        (k1,) = rd.unpack("<I")
        stage2 = [RotationDecomp(rd.array("<f8", m1 * m1).reshape(m1, m1), m) for _ in range(k1)]
    params = mid_params_from_record(rec)
    trees = list(enumerate_trees(params.proj))
    N, b = params.ball.N, params.b
    (blocks,) = rd.unpack("<I")
    mids = []
    for _ in range(blocks):
        fams = [[BallLatticeFamily(params.ball, rd.array("<f8", N * b).reshape(N, b), verified=True)
                 for _ in range(params.parts)] for _ in trees]
        family = TensorFamily(params, trees, fams)
        (K,) = rd.unpack("<Q")
        keys = rd.array("<i4", K * params.row_len).reshape(K, params.row_len)
        indptr = rd.array("<i8", K + 1)
        ids = rd.array("<i8", int(indptr[-1]) if K else 0)
        mids.append(MidIndex(family, keys, indptr, ids, None, rec["c_mid"]))
    n, d = rd.unpack("<QI")
    points = rd.array("<f8", n * d).reshape(n, d)
    if rd.pos != len(data):
        raise MalformedRecord(f"{len(data) - rd.pos} trailing bytes after the index")
    if d != rec["d"] or n != rec["n"]:
        raise DimensionMismatch("stored points do not match the parameter record")
    return TopIndex(rec, points, stage1, stage2, mids)


def save_index(index, path) -> int:
    data = index_to_bytes(index)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_index(path):
    try:
        data = open(path, "rb").read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    return index_from_bytes(data)
