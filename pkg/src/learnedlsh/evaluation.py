"""Metrics, oracles and accounting for the benchmark harness."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import e2lsh, llsh
from .baselines import Neighbors, brute_knn
from .neural import Mlp
from .vecdata import Dataset


def fitting_rate(pred: np.ndarray, labels: np.ndarray) -> float:
    """Share of integer entries where prediction and label agree exactly."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {labels.shape}")
    if pred.size == 0:
        raise ValueError("fitting rate of an empty matrix is undefined")
    return float(np.mean(pred == labels))


@dataclass(frozen=True)
class GroundTruth:
    ids: np.ndarray  # (n_queries, depth)
    dists: np.ndarray

    @property
    def depth(self) -> int:
        return self.ids.shape[1]


def ground_truth(ds: Dataset, queries: Dataset, k: int) -> GroundTruth:
    depth = min(k, ds.n)
    ids = np.empty((queries.n, depth), np.int64)
    dists = np.empty((queries.n, depth))
    for i, q in enumerate(queries.points):
        res = brute_knn(ds, q, depth)
        ids[i] = [r[0] for r in res]
        dists[i] = [r[1] for r in res]
    return GroundTruth(ids, dists)


def recall_at_k(results: list[Neighbors], truth: GroundTruth, k: int) -> float:
    """Mean over queries of ``|returned ids ∩ true top-k| / k``; short results count as misses."""
    if k > truth.depth:
        raise ValueError(f"k={k} exceeds ground-truth depth {truth.depth}")
    if len(results) != truth.ids.shape[0]:
        raise ValueError(f"{len(results)} result lists for {truth.ids.shape[0]} queries")
    if not results:
        return 0.0
    hits = [len({i for i, _ in res[:k]} & set(truth.ids[q, :k].tolist())) for q, res in enumerate(results)]
    return float(np.mean(hits)) / k


# -- collision probability ------------------------------------------------------


def _abs_stable_density(p: int) -> Callable[[float], float]:
    if p == 2:
        return lambda x: 2.0 / math.sqrt(2.0 * math.pi) * math.exp(-x * x / 2.0)
    if p == 1:
        return lambda x: 2.0 / (math.pi * (1.0 + x * x))
    raise ValueError(f"p must be 1 or 2, got {p}")


def adaptive_simpson(
    f: Callable[[float], float], a: float, b: float, tol: float = 1e-9, max_depth: int = 60, min_depth: int = 5
) -> float:
    """Adaptive Simpson's rule with Richardson correction.

    Every interval is split at least ``min_depth`` times before the error
    estimate may stop the recursion; otherwise two coarse halves that agree by
    accident end the integration early.
    """

    def simpson(fa, fm, fb, h):
        return h / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, m - a)
        right = simpson(fm, frm, fb, b - m)
        delta = left + right - whole
        if depth >= max_depth or (depth >= min_depth and abs(delta) <= 15.0 * tol):
            return left + right + delta / 15.0
        return recurse(a, m, fa, flm, fm, left, tol / 2.0, depth + 1) + recurse(
            m, b, fm, frm, fb, right, tol / 2.0, depth + 1
        )

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 0)


def collision_prob(c: float, r: float, p: int = 2) -> float:
    """Probability that two points at distance ``c`` share a hash of width ``r``.

    Integrates ``(1/c) f_p(t/c) (1 - t/r)`` over ``[0, r]``, where ``f_p`` is the
    density of ``|X|`` for a standard p-stable ``X``; ``(1/c) f_p(t/c)`` is then
    the density of the projected distance ``|c X|``.
    """
    if c <= 0 or r <= 0:
        raise ValueError(f"need c > 0 and r > 0, got c={c}, r={r}")
    f = _abs_stable_density(p)
    val = adaptive_simpson(lambda t: f(t / c) / c * (1.0 - t / r), 0.0, r)
    return min(1.0, max(0.0, val))


# -- sizes and timing -----------------------------------------------------------

ENTRY_BYTES = 12  # 8-byte (slot, fingerprint) key + 4-byte id
TABLE_DIRECTORY_BYTES = 8  # per-table entry count


def _tables_bytes(tables: list[e2lsh.HashTable]) -> int:
    return sum(TABLE_DIRECTORY_BYTES + ENTRY_BYTES * len(t) for t in tables)


def e2lsh_coefficient_bytes(L: int, k: int, d: int, float_bytes: int = 8) -> int:
    """Projections and offsets at ``float_bytes`` each, plus two u32 bucket coefficients per function."""
    return (d * k * L + k * L) * float_bytes + 2 * 4 * k * L


def mlp_bytes(net: Mlp, float_bytes: int = 4) -> int:
    return net.n_params * float_bytes


def model_bytes(model: llsh.LlshModel, float_bytes: int = 4) -> int:
    """Encoder and unit parameters at ``float_bytes``, label statistics as f64."""
    total = mlp_bytes(model.units, float_bytes) + 16 * model.label_mean.size
    if model.encoder is not None:
        total += mlp_bytes(model.encoder, float_bytes)
    return total


def index_size_bytes(obj, float_bytes: int | None = None) -> int:
    """Deterministic byte accounting for an index or model.

    E2LSH indexes count f64 coefficients; learned models count f32 parameters,
    matching their serialized forms. A learned index counts only its bucket
    coefficients and tables (the model is accounted separately).
    """
    if isinstance(obj, e2lsh.E2lshIndex):
        p = obj.params
        return e2lsh_coefficient_bytes(p.L, p.k, obj.ds.dim, float_bytes or 8) + _tables_bytes(obj.tables)
    if isinstance(obj, llsh.LlshIndex):
        return 2 * 4 * obj.model.k * obj.model.L + _tables_bytes(obj.tables)
    if isinstance(obj, llsh.LlshModel):
        return model_bytes(obj, float_bytes or 4)
    if isinstance(obj, Mlp):
        return mlp_bytes(obj, float_bytes or 4)
    raise TypeError(f"no size accounting for {type(obj).__name__}")


def time_op(thunk: Callable[[], object], reps: int = 5, warmup: int = 1) -> int:
    """Median wall time of ``reps`` calls in nanoseconds, after ``warmup`` untimed calls."""
    if reps < 1:
        raise ValueError("need at least one timed repetition")
    for _ in range(warmup):
        thunk()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        thunk()
        samples.append(time.perf_counter_ns() - t0)
    return int(np.median(samples))


# -- reports ------------------------------------------------------------------------

REPORT_VERSION = 1


@dataclass
class BenchReport:
    algorithm: str
    dataset: str
    seed: int
    n: int
    d: int
    n_queries: int
    topk: int
    recall_at_k: float | None = None
    fitting_rate: float | None = None
    build_time_ns: int | None = None
    train_time_ns: int | None = None
    query_time_ns: float | None = None
    hash_time_ns: int | None = None
    index_bytes: int | None = None
    model_bytes: int | None = None
    config: dict = field(default_factory=dict)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.columns()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def csv_row(self) -> list[str]:
        row = []
        for name in self.columns():
            v = getattr(self, name)
            if name == "config":
                row.append(";".join(f"{k}={v[k]}" for k in sorted(v)))
            elif v is None:
                row.append("")
            elif isinstance(v, float):
                row.append(repr(v))
            else:
                row.append(str(v))
        return row


def csv_header_comment() -> str:
    return f"# learnedlsh bench report v{REPORT_VERSION}: " + ",".join(BenchReport.columns())


def reports_to_csv(reports: list[BenchReport]) -> str:
    buf = io.StringIO()
    buf.write(csv_header_comment() + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BenchReport.columns())
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def read_reports_csv(text: str) -> list[dict[str, str]]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
