"""E2LSH: 2-stable (Gaussian) projection hashing with dual bucket hashes.

A point is hashed by ``L`` families of ``k`` functions
``h(v) = floor((a . v + b) / r)``. Each k-vector is then reduced to a table
slot ``H1`` and a fingerprint ``H2`` modulo the prime ``C = 2**32 - 5``. A
query collects, from every table, the points whose slot *and* fingerprint
match its own and re-ranks them by exact distance.

Tables are stored as sorted ``uint64`` keys ``H1 << 32 | H2`` next to point
ids, so a bucket lookup is two binary searches.
"""

from __future__ import annotations

import io
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import Neighbors, distances, rank
from .vecdata import Dataset

PRIME = 4294967291  # 2**32 - 5
E2LX_MAGIC = b"E2LX"
E2LX_VERSION = 1
_CHUNK = 4096


def worker_count() -> int:
    """Thread cap from ``LLSH_THREADS`` (default: CPU count)."""
    try:
        n = int(os.environ.get("LLSH_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class StableHashFunction:
    a: np.ndarray
    b: float
    r: float

    def __post_init__(self):
        if not 0.0 < self.b < self.r:
            raise ValueError(f"offset b={self.b} must lie in (0, r={self.r})")


@dataclass(frozen=True)
class HashFamily:
    """``k`` functions sharing ``d`` and ``r``; row ``i`` of ``a`` is function ``i``."""

    a: np.ndarray  # (k, d) float64
    b: np.ndarray  # (k,) float64
    r: float

    @property
    def k(self) -> int:
        return self.a.shape[0]

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    @classmethod
    def from_functions(cls, functions: list[StableHashFunction]) -> "HashFamily":
        if not functions or len({f.r for f in functions}) != 1:
            raise ValueError("a family needs at least one function and a shared r")
        return cls(np.stack([f.a for f in functions]), np.array([f.b for f in functions]), functions[0].r)

    @property
    def functions(self) -> list[StableHashFunction]:
        return [StableHashFunction(self.a[i], float(self.b[i]), self.r) for i in range(self.k)]


def sample_function(d: int, r: float, rng: np.random.Generator) -> StableHashFunction:
    if d < 1 or r <= 0:
        raise ValueError(f"need d >= 1 and r > 0, got d={d}, r={r}")
    a = rng.standard_normal(d)
    b = 0.0
    while b == 0.0:  # uniform draws live in [0, r); zero is excluded
        b = float(rng.uniform(0.0, r))
    return StableHashFunction(a, b, float(r))


def sample_family(d: int, k: int, r: float, rng: np.random.Generator) -> HashFamily:
    return HashFamily.from_functions([sample_function(d, r, rng) for _ in range(k)])


def _projections(a: np.ndarray, X: np.ndarray) -> np.ndarray:
    # Row-wise products summed along the last axis: every (point, function)
    # dot product is reduced in the same order whatever the batch size, so a
    # point hashes identically alone or inside a dataset.
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((X.shape[0], a.shape[0]))
    for s in range(0, X.shape[0], _CHUNK):
        xs = X[s : s + _CHUNK]
        out[s : s + _CHUNK] = np.sum(xs[:, None, :] * a[None, :, :], axis=-1)
    return out


def hash_point(f: StableHashFunction, v) -> int:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != f.a.shape:
        raise ValueError(f"vector of shape {v.shape} for a function of dimension {f.a.shape[0]}")
    proj = _projections(f.a[None, :], v[None, :])[0, 0]
    return int(np.floor((proj + f.b) / f.r))


def hash_family(g: HashFamily, v) -> np.ndarray:
    """k-vector of hashes for one point, or an ``(n, k)`` matrix for a batch."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    X = v[None, :] if single else v
    if X.ndim != 2 or X.shape[1] != g.dim:
        raise ValueError(f"input of shape {v.shape} for a family of dimension {g.dim}")
    h = np.floor((_projections(g.a, X) + g.b) / g.r).astype(np.int64)
    return h[0] if single else h


def hash_looped(families: list[HashFamily], X: np.ndarray) -> np.ndarray:
    """``(n, L*k)`` hashes computed one function at a time.

    Same values as stacking :func:`hash_family` outputs; kept as the
    per-function reference path for timing comparisons.
    """
    X = np.asarray(X, dtype=np.float64)
    cols = []
    for g in families:
        for f in g.functions:
            proj = np.sum(X * f.a, axis=1)
            cols.append(np.floor((proj + f.b) / f.r))
    return np.stack(cols, axis=1).astype(np.int64) if cols else np.zeros((X.shape[0], 0), np.int64)


@dataclass(frozen=True)
class BucketHasher:
    r1: np.ndarray  # (k,) uint64 in [1, C-1]
    r2: np.ndarray
    table_size: int

    def __post_init__(self):
        if self.table_size < 1:
            raise ValueError("table size must be at least 1")
        for coeffs in (self.r1, self.r2):
            if coeffs.size and (coeffs.min() < 1 or coeffs.max() > PRIME - 1):
                raise ValueError("bucket coefficients must lie in [1, C-1]")

    @property
    def k(self) -> int:
        return self.r1.size


def sample_hasher(k: int, table_size: int, rng: np.random.Generator) -> BucketHasher:
    r1 = rng.integers(1, PRIME, size=k, dtype=np.uint64)
    r2 = rng.integers(1, PRIME, size=k, dtype=np.uint64)
    return BucketHasher(r1, r2, int(table_size))


def _modsum(coeffs: np.ndarray, residues: np.ndarray) -> np.ndarray:
    acc = np.zeros(residues.shape[0], dtype=np.uint64)
    c = np.uint64(PRIME)
    for i in range(coeffs.size):
        # both factors < 2**32, so the product fits in uint64
        acc = (acc + (coeffs[i] * residues[:, i]) % c) % c
    return acc


def bucket_hash(h: BucketHasher, x) -> tuple[np.ndarray, np.ndarray] | tuple[int, int]:
    """``(H1, H2)`` for one k-vector, or arrays of them for an ``(n, k)`` batch."""
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != h.k:
        raise ValueError(f"k-vector of shape {x.shape} for a hasher with k={h.k}")
    residues = np.mod(X, PRIME).astype(np.uint64)
    h2 = _modsum(h.r2, residues)
    h1 = _modsum(h.r1, residues) % np.uint64(h.table_size)
    if single:
        return int(h1[0]), int(h2[0])
    return h1, h2


@dataclass(frozen=True)
class HashTable:
    """Entries sorted by ``(H1, H2, id)``; ``keys`` packs ``H1 << 32 | H2``."""

    keys: np.ndarray  # uint64
    ids: np.ndarray  # int64

    @classmethod
    def from_hashes(cls, h1: np.ndarray, h2: np.ndarray, ids: np.ndarray) -> "HashTable":
        keys = (h1.astype(np.uint64) << np.uint64(32)) | h2.astype(np.uint64)
        order = np.lexsort((ids, keys))
        return cls(keys[order], np.asarray(ids, dtype=np.int64)[order])

    def __len__(self) -> int:
        return self.keys.size

    def lookup(self, h1: int, h2: int) -> np.ndarray:
        key = np.uint64((h1 << 32) | h2)
        lo = np.searchsorted(self.keys, key, side="left")
        hi = np.searchsorted(self.keys, key, side="right")
        return self.ids[lo:hi]

    def slots(self) -> dict[int, list[tuple[int, int]]]:
        """Slot -> [(fingerprint, id), ...] view of the table."""
        out: dict[int, list[tuple[int, int]]] = {}
        for key, i in zip(self.keys.tolist(), self.ids.tolist()):
            out.setdefault(key >> 32, []).append((key & 0xFFFFFFFF, i))
        return out


@dataclass(frozen=True)
class E2lshParams:
    L: int
    k: int
    r: float
    table_size: int


@dataclass(frozen=True)
class E2lshIndex:
    params: E2lshParams
    families: list[HashFamily]
    hashers: list[BucketHasher]
    tables: list[HashTable]
    ds: Dataset

    @property
    def n_entries(self) -> int:
        return sum(len(t) for t in self.tables)


def table_streams(seed: int, L: int) -> list[np.random.Generator]:
    """One independent generator per table, derived from the master seed by table index."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(L)]


def build_tables(
    signatures: list[np.ndarray], hashers: list[BucketHasher], ids: np.ndarray
) -> list[HashTable]:
    """Bucket-hash each table's ``(n, k)`` signature matrix and sort it into a table."""

    def one(j: int) -> HashTable:
        h1, h2 = bucket_hash(hashers[j], signatures[j])
        return HashTable.from_hashes(h1, h2, ids)

    with ThreadPoolExecutor(max_workers=min(worker_count(), max(1, len(hashers)))) as pool:
        return list(pool.map(one, range(len(hashers))))


def build_index(
    ds: Dataset, L: int = 30, k: int = 10, r: float = 4.0, table_size: int | None = None, seed: int = 0
) -> E2lshIndex:
    """Hash every point into ``L`` tables; ``table_size`` defaults to ``n``.

    Table ``j`` draws its family and bucket coefficients from its own stream,
    so the result does not depend on build order or thread count.
    """
    if ds.n < 1:
        raise ValueError("cannot index an empty dataset")
    if L < 1 or k < 1 or r <= 0:
        raise ValueError(f"need L >= 1, k >= 1, r > 0; got L={L}, k={k}, r={r}")
    T = ds.n if table_size is None else int(table_size)
    families, hashers = [], []
    for rng in table_streams(seed, L):
        families.append(sample_family(ds.dim, k, r, rng))
        hashers.append(sample_hasher(k, T, rng))

    with ThreadPoolExecutor(max_workers=min(worker_count(), L)) as pool:
        signatures = list(pool.map(lambda g: hash_family(g, ds.points), families))
    tables = build_tables(signatures, hashers, ds.ids)
    return E2lshIndex(E2lshParams(L, k, float(r), T), families, hashers, tables, ds)


def gather_candidates(tables: list[HashTable], hashers: list[BucketHasher], signatures: list[np.ndarray]) -> np.ndarray:
    found = []
    for table, hasher, sig in zip(tables, hashers, signatures):
        h1, h2 = bucket_hash(hasher, sig)
        found.append(table.lookup(h1, h2))
    return np.unique(np.concatenate(found)) if found else np.empty(0, np.int64)


def rank_candidates(ds: Dataset, cand_ids: np.ndarray, q: np.ndarray, topk: int) -> Neighbors:
    if cand_ids.size == 0:
        return []
    rows = _rows_for_ids(ds, cand_ids)
    return rank(cand_ids, distances(ds.points[rows], q), topk)


def _rows_for_ids(ds: Dataset, ids: np.ndarray) -> np.ndarray:
    if ds.n and ds.ids[0] == 0 and ds.ids[-1] == ds.n - 1 and np.all(np.diff(ds.ids) == 1):
        return ids
    order = np.argsort(ds.ids)
    return order[np.searchsorted(ds.ids, ids, sorter=order)]


def query(idx: E2lshIndex, q, topk: int) -> Neighbors:
    """Exact re-ranking of every point sharing ``(H1, H2)`` with ``q`` in some table.

    No cap is placed on the number of candidates examined.
    """
    if topk < 1:
        raise ValueError(f"topk must be positive, got {topk}")
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (idx.ds.dim,):
        raise ValueError(f"query has shape {q.shape}, expected ({idx.ds.dim},)")
    signatures = [hash_family(g, q) for g in idx.families]
    cand = gather_candidates(idx.tables, idx.hashers, signatures)
    return rank_candidates(idx.ds, cand, q, topk)


# -- serialization ---------------------------------------------------------

_E2LX_HEAD = struct.Struct("<4sHIIIdQ")  # magic, version, L, k, d, r, T


def write_hashers(f, hashers: list[BucketHasher]) -> None:
    for h in hashers:
        f.write(h.r1.astype("<u4").tobytes())
        f.write(h.r2.astype("<u4").tobytes())


def read_hashers(f, L: int, k: int, T: int) -> list[BucketHasher]:
    out = []
    for _ in range(L):
        r1 = np.frombuffer(_read_exact(f, 4 * k), dtype="<u4").astype(np.uint64)
        r2 = np.frombuffer(_read_exact(f, 4 * k), dtype="<u4").astype(np.uint64)
        out.append(BucketHasher(r1, r2, T))
    return out


def write_tables(f, tables: list[HashTable]) -> None:
    for t in tables:
        f.write(struct.pack("<Q", len(t)))
        f.write(t.keys.astype("<u8").tobytes())
        f.write(t.ids.astype("<u4").tobytes())


def read_tables(f, L: int) -> list[HashTable]:
    tables = []
    for _ in range(L):
        (count,) = struct.unpack("<Q", _read_exact(f, 8))
        keys = np.frombuffer(_read_exact(f, 8 * count), dtype="<u8").astype(np.uint64)
        ids = np.frombuffer(_read_exact(f, 4 * count), dtype="<u4").astype(np.int64)
        tables.append(HashTable(keys, ids))
    return tables


def _read_exact(f, size: int) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise ValueError("truncated index blob")
    return data


E2LX_HEADER_BYTES = _E2LX_HEAD.size


def index_to_bytes(idx: E2lshIndex) -> bytes:
    """``E2LX`` blob: header, f64 projections and offsets per family, u32 bucket
    coefficients, then per table a u64 entry count and sorted (key u64, id u32)
    columns. The dataset itself is not included."""
    p = idx.params
    buf = io.BytesIO()
    buf.write(_E2LX_HEAD.pack(E2LX_MAGIC, E2LX_VERSION, p.L, p.k, idx.ds.dim, p.r, p.table_size))
    for g in idx.families:
        buf.write(g.a.astype("<f8").tobytes())
        buf.write(g.b.astype("<f8").tobytes())
    write_hashers(buf, idx.hashers)
    write_tables(buf, idx.tables)
    return buf.getvalue()


def index_from_bytes(data: bytes, ds: Dataset) -> E2lshIndex:
    f = io.BytesIO(data)
    magic, version, L, k, d, r, T = _E2LX_HEAD.unpack(_read_exact(f, _E2LX_HEAD.size))
    if magic != E2LX_MAGIC or version != E2LX_VERSION:
        raise ValueError("not an E2LX v1 index")
    if d != ds.dim:
        raise ValueError(f"index was built for dimension {d}, dataset has {ds.dim}")
    families = []
    for _ in range(L):
        a = np.frombuffer(_read_exact(f, 8 * k * d), dtype="<f8").reshape(k, d).astype(np.float64)
        b = np.frombuffer(_read_exact(f, 8 * k), dtype="<f8").astype(np.float64)
        families.append(HashFamily(a, b, r))
    hashers = read_hashers(f, L, k, T)
    tables = read_tables(f, L)
    known = set(ds.ids.tolist())
    if any(not known.issuperset(t.ids.tolist()) for t in tables):
        raise ValueError("index refers to ids missing from the dataset")
    return E2lshIndex(E2lshParams(L, k, r, T), families, hashers, tables, ds)
