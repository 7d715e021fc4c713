"""Vector datasets: the in-memory type, synthetic generators and file I/O.

Two on-disk formats are supported:

``llshbin``
    ``b"LLSH"``, u16 version (1), u32 count, u32 dim, then ``count * dim``
    little-endian float32 values, row-major.
``csv``
    one vector per line, comma-separated decimal floats, no header.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LLSHBIN_MAGIC = b"LLSH"
LLSHBIN_VERSION = 1
LLSHBIN_HEADER = struct.Struct("<4sHII")

KINDS = ("uniform", "normal", "lognormal", "exponential")


class VectorFormatError(ValueError):
    """A vector file could not be parsed. The message names the offending offset."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` float32 vectors of width ``dim`` with unique non-negative ids.

    Arrays are stored read-only, so a Dataset can be shared between threads.
    """

    points: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float32, copy=True)
        ids = np.array(self.ids, dtype=np.int64, copy=True)
        if points.ndim != 2 or points.shape[1] < 1:
            raise ValueError(f"points must be an (n, d) array with d >= 1, got shape {points.shape}")
        if ids.shape != (points.shape[0],):
            raise ValueError(f"{ids.shape[0] if ids.ndim else 'scalar'} ids for {points.shape[0]} points")
        if ids.size and (ids.min() < 0 or np.unique(ids).size != ids.size):
            raise ValueError("ids must be unique and non-negative")
        if not np.isfinite(points).all():
            raise ValueError("points contain NaN or Inf")
        points.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_points(cls, points) -> "Dataset":
        points = np.asarray(points)
        return cls(points, np.arange(points.shape[0]))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.points.shape == other.points.shape
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.points.view(np.uint32), other.points.view(np.uint32))
        )

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Rows by position (not by id), ids carried along."""
        return Dataset(self.points[rows], self.ids[rows])


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    n: int
    d: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.n < 1 or self.d < 1:
            raise ValueError(f"need n >= 1 and d >= 1, got n={self.n}, d={self.d}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def describe(self) -> str:
        return f"{self.kind}(n={self.n},d={self.d},seed={self.seed})"


def generate(spec: DatasetSpec) -> Dataset:
    """I.i.d. coordinates: uniform[0,1), N(0,1), lognormal of N(0,1), or Exp(1)."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.n, spec.d)
    if spec.kind == "uniform":
        x = rng.uniform(0.0, 1.0, shape)
    elif spec.kind == "normal":
        x = rng.normal(0.0, 1.0, shape)
    elif spec.kind == "lognormal":
        x = rng.lognormal(0.0, 1.0, shape)
    else:
        x = rng.exponential(1.0, shape)
    return Dataset(x.astype(np.float32), np.arange(spec.n))


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("llshbin", "csv"):
            raise ValueError(f"unknown vector format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "llshbin"


def write_vectors(ds: Dataset, path: str | os.PathLike, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "llshbin":
        with open(path, "wb") as f:
            f.write(LLSHBIN_HEADER.pack(LLSHBIN_MAGIC, LLSHBIN_VERSION, ds.n, ds.dim))
            f.write(np.ascontiguousarray(ds.points, dtype="<f4").tobytes())
    else:
        # 17 significant digits round-trip every float64, hence every float32
        with open(path, "w") as f:
            for row in ds.points.astype(np.float64):
                f.write(",".join(format(v, ".17g") for v in row))
                f.write("\n")


def read_vectors(path: str | os.PathLike, fmt: str | None = None, dim: int | None = None) -> Dataset:
    """Load a dataset; ids are assigned 0..n-1.

    ``dim`` is checked against the file when given, and is what makes an empty
    CSV file loadable.
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    ds = _read_llshbin(path) if fmt == "llshbin" else _read_csv(path, dim)
    if dim is not None and ds.dim != dim:
        raise VectorFormatError(f"{path}: vectors have dimension {ds.dim}, expected {dim}")
    return ds


def _read_llshbin(path: Path) -> Dataset:
    raw = path.read_bytes()
    if len(raw) < LLSHBIN_HEADER.size:
        raise VectorFormatError(f"{path}: truncated header ({len(raw)} bytes) at byte offset 0")
    magic, version, count, dim = LLSHBIN_HEADER.unpack_from(raw)
    if magic != LLSHBIN_MAGIC:
        raise VectorFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != LLSHBIN_VERSION:
        raise VectorFormatError(f"{path}: unsupported version {version} at byte offset 4")
    if dim < 1:
        raise VectorFormatError(f"{path}: dimension must be positive at byte offset 10")
    expected = LLSHBIN_HEADER.size + 4 * count * dim
    if len(raw) != expected:
        raise VectorFormatError(
            f"{path}: header declares {count}x{dim} vectors ({expected} bytes) but file has "
            f"{len(raw)} bytes; mismatch at byte offset {min(len(raw), expected)}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=LLSHBIN_HEADER.size).reshape(count, dim)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        offset = LLSHBIN_HEADER.size + 4 * int(bad[0])
        raise VectorFormatError(f"{path}: non-finite value at byte offset {offset}")
    return Dataset(values.astype(np.float32), np.arange(count))


def _read_csv(path: Path, dim: int | None) -> Dataset:
    rows: list[list[float]] = []
    width = dim
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise VectorFormatError(f"{path}: line {lineno} has {len(fields)} fields, expected {width}")
            try:
                row = [float(x) for x in fields]
            except ValueError:
                raise VectorFormatError(f"{path}: line {lineno} is not a row of decimal floats") from None
            if not all(math.isfinite(v) for v in row):
                raise VectorFormatError(f"{path}: non-finite value on line {lineno}")
            rows.append(row)
    if width is None:
        raise VectorFormatError(f"{path}: empty CSV file, dimension cannot be inferred")
    points = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    with np.errstate(over="ignore"):
        narrowed = points.astype(np.float32)
    if not np.isfinite(narrowed).all():
        line = int(np.flatnonzero(~np.isfinite(narrowed).all(axis=1))[0]) + 1
        raise VectorFormatError(f"{path}: value overflows float32 in data row {line}")
    return Dataset(narrowed, np.arange(len(rows)))


def split(ds: Dataset, holdout_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random disjoint (train, holdout) partition; both keep the original ids and order."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    if ds.n < 2:
        raise ValueError("need at least two points to split")
    n_hold = int(math.floor(holdout_fraction * ds.n + 0.5))
    perm = np.random.default_rng(seed).permutation(ds.n)
    hold = np.sort(perm[:n_hold])
    train = np.sort(perm[n_hold:])
    return ds.subset(train), ds.subset(hold)
