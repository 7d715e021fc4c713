"""Command-line front end: ``gen``, ``build``, ``query``, ``bench`` and ``inspect``.

Run parameters come from an optional flat ``key=value`` file (``--config``)
overridden by command-line flags. Exit codes: 0 on success, 1 for usage or
configuration errors, 2 for data errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import struct
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import baselines, e2lsh, llsh
from .evaluation import (
    BenchReport,
    csv_header_comment,
    e2lsh_coefficient_bytes,
    ground_truth,
    index_size_bytes,
    model_bytes,
    recall_at_k,
    time_op,
)
from .neural import TrainConfig, forward, mlp_from_bytes
from .vecdata import KINDS, Dataset, DatasetSpec, VectorFormatError, generate, read_vectors, write_vectors

ALGORITHMS = ("e2lsh", "llsh", "llsh-ensemble", "brute", "kdtree", "balltree")
SWEEP_AXES = ("L", "K", "M", "n", "d")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    algorithm: str = "e2lsh"
    data: str = ""
    kind: str = "uniform"
    n: int = 10000
    d: int = 100
    L: int = 30
    k: int = 10
    r: float = 4.0
    M: int = 2
    m1: int = 32
    m2: int = 16
    m3: int = 8
    code_scale: float = 0.5
    ensemble_size: int = 3
    lr: float = 3e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    ae_lr: float = 1e-3
    ae_epochs: int = 30
    ae_patience: int = 5
    holdout: float = 0.1
    leaf_size: int = baselines.DEFAULT_LEAF_SIZE
    topk: int = 10
    queries: int = 1000
    seeds: str = "0"
    sweep_axis: str = ""
    sweep_grid: str = ""
    hash_reps: int = 3

    def check(self) -> None:
        for alg in self.algorithms():
            if alg not in ALGORITHMS:
                raise UsageError(f"unknown algorithm {alg!r}; expected one of {', '.join(ALGORITHMS)}")
        if self.kind not in KINDS:
            raise UsageError(f"unknown kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.topk < 1:
            raise UsageError("topk must be positive")
        if self.queries < 0 or self.n < 1 or self.d < 1:
            raise UsageError("n and d must be positive and queries non-negative")
        if self.sweep_axis and self.sweep_axis not in SWEEP_AXES:
            raise UsageError(f"sweep_axis must be one of {', '.join(SWEEP_AXES)}")
        if self.sweep_axis and not self.grid():
            raise UsageError("sweep_grid must list at least one value")
        if any(v <= 0 for v in self.grid()):
            raise UsageError("sweep grid values must be positive")
        self.seed_list()

    def algorithms(self) -> list[str]:
        return [a.strip() for a in self.algorithm.split(",") if a.strip()]

    def seed_list(self) -> list[int]:
        try:
            seeds = [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"seeds must be a comma-separated list of integers, got {self.seeds!r}") from None
        if not seeds or min(seeds) < 0:
            raise UsageError("need at least one non-negative seed")
        return seeds

    def grid(self) -> list[int]:
        try:
            return [int(v) for v in self.sweep_grid.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"sweep_grid must be integers, got {self.sweep_grid!r}") from None

    def llsh_config(self, ensemble: bool) -> llsh.LlshConfig:
        try:
            return llsh.LlshConfig(
                M=self.M,
                L=self.L,
                k=self.k,
                m1=self.m1,
                m2=self.m2,
                m3=self.m3,
                r=self.r,
                train=TrainConfig(self.lr, self.batch_size, self.max_epochs, self.patience),
                ae_train=TrainConfig(self.ae_lr, self.batch_size, self.ae_epochs, self.ae_patience),
                ensemble_size=self.ensemble_size if ensemble else 1,
                code_scale=self.code_scale,
                val_fraction=0.1,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def echo(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise UsageError(f"{key} expects {kind}, got {value!r}") from None
    return value


def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text()))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    cfg.check()
    return cfg


# -- dataset plumbing -------------------------------------------------------------


def _load(path: str, dim: int | None = None) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    try:
        return read_vectors(p, dim=dim)
    except VectorFormatError as exc:
        raise DataError(str(exc)) from None


def _take_queries(ds: Dataset, count: int, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint (index, queries) split; queries never enter the index."""
    if count >= ds.n:
        raise UsageError(f"{count} queries leave no points to index out of {ds.n}")
    perm = np.random.default_rng([seed, 0x9E]).permutation(ds.n)
    return ds.subset(np.sort(perm[count:])), ds.subset(np.sort(perm[:count]))


def _cell_data(cfg: RunConfig, seed: int) -> tuple[Dataset, Dataset, str]:
    if cfg.data:
        ds = _load(cfg.data)
        base, queries = _take_queries(ds, cfg.queries, seed)
        return base, queries, f"{Path(cfg.data).name}(n={base.n},d={ds.dim})"
    spec = DatasetSpec(cfg.kind, cfg.n + cfg.queries, cfg.d, seed)
    ds = generate(spec)
    base, queries = ds.subset(np.arange(cfg.n)), ds.subset(np.arange(cfg.n, ds.n))
    return base, queries, f"{cfg.kind}(n={cfg.n},d={cfg.d})"


# -- building ---------------------------------------------------------------------


@dataclass
class Built:
    algorithm: str
    search: object  # callable q -> Neighbors
    hasher: object | None = None  # callable () -> hashes for the whole base set
    fitting_rate: float | None = None
    build_time_ns: int = 0
    train_time_ns: int | None = None
    index_bytes: int | None = None
    model_bytes: int | None = None
    artifacts: dict = field(default_factory=dict)


def build_algorithm(alg: str, ds: Dataset, cfg: RunConfig, seed: int) -> Built:
    if alg in ("llsh", "llsh-ensemble"):
        lcfg = cfg.llsh_config(ensemble=alg == "llsh-ensemble")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out = llsh.build_pipeline(ds, lcfg, seed, holdout_fraction=cfg.holdout)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        idx = out.index
        points = ds.points.astype(np.float64)

        def hash_all():
            return llsh.predict_hash(out.model, forward(out.model.encoder, points))

        return Built(
            alg,
            lambda q: llsh.query_llsh(idx, q, cfg.topk),
            hasher=hash_all,
            fitting_rate=out.fitting_rate,
            build_time_ns=out.build_time_ns,
            train_time_ns=out.train_time_ns,
            index_bytes=index_size_bytes(idx),
            model_bytes=model_bytes(out.model),
            artifacts={"index": idx, "model": out.model, "config": lcfg},
        )
    t0 = time.perf_counter_ns()
    if alg == "e2lsh":
        idx = e2lsh.build_index(ds, cfg.L, cfg.k, cfg.r, seed=seed)
        t1 = time.perf_counter_ns()
        return Built(
            alg,
            lambda q: e2lsh.query(idx, q, cfg.topk),
            hasher=lambda: e2lsh.hash_looped(idx.families, ds.points),
            build_time_ns=t1 - t0,
            index_bytes=index_size_bytes(idx),
            model_bytes=e2lsh_coefficient_bytes(cfg.L, cfg.k, ds.dim, float_bytes=4),
            artifacts={"index": idx},
        )
    if alg == "brute":
        return Built(alg, lambda q: baselines.brute_knn(ds, q, cfg.topk), index_bytes=0)
    if alg == "kdtree":
        tree = baselines.build_kdtree(ds, cfg.leaf_size)
        return Built(alg, lambda q: baselines.query_kdtree(tree, q, cfg.topk), build_time_ns=time.perf_counter_ns() - t0)
    if alg == "balltree":
        tree = baselines.build_balltree(ds, cfg.leaf_size)
        return Built(alg, lambda q: baselines.query_balltree(tree, q, cfg.topk), build_time_ns=time.perf_counter_ns() - t0)
    raise UsageError(f"unknown algorithm {alg!r}")


# -- bench ---------------------------------------------------------------------------


def _cells(cfg: RunConfig) -> list[RunConfig]:
    if not cfg.sweep_axis:
        return [cfg]
    attr = "k" if cfg.sweep_axis == "K" else cfg.sweep_axis
    return [replace(cfg, **{attr: v}) for v in cfg.grid()]


def run_bench(cfg: RunConfig, on_report=None) -> list[BenchReport]:
    """Every (cell, algorithm, seed) combination, timed one after another."""
    reports = []
    for cell in _cells(cfg):
        for seed in cell.seed_list():
            base, queries, desc = _cell_data(cell, seed)
            truth = ground_truth(base, queries, cell.topk) if queries.n else None
            for alg in cell.algorithms():
                built = build_algorithm(alg, base, cell, seed)
                results = [built.search(q) for q in queries.points]
                q_time = None
                if queries.n:
                    total = time_op(lambda: [built.search(q) for q in queries.points], reps=1, warmup=0)
                    q_time = total / queries.n
                hash_time = time_op(built.hasher, reps=cell.hash_reps) if built.hasher else None
                echo = cell.echo()
                echo["algorithm"] = alg
                report = BenchReport(
                    algorithm=alg,
                    dataset=desc,
                    seed=seed,
                    n=base.n,
                    d=base.dim,
                    n_queries=queries.n,
                    topk=cell.topk,
                    recall_at_k=recall_at_k(results, truth, min(cell.topk, truth.depth)) if truth else None,
                    fitting_rate=built.fitting_rate,
                    build_time_ns=built.build_time_ns,
                    train_time_ns=built.train_time_ns,
                    query_time_ns=q_time,
                    hash_time_ns=hash_time,
                    index_bytes=built.index_bytes,
                    model_bytes=built.model_bytes,
                    config=echo,
                )
                reports.append(report)
                if on_report:
                    on_report(report)
    return reports


class _RowWriter:
    """Appends one complete CSV row per write call."""

    def __init__(self, path: str | None, json_path: str | None):
        self.path, self.json_path = path, json_path
        if path:
            with open(path, "w") as f:
                f.write(csv_header_comment() + "\n" + ",".join(BenchReport.columns()) + "\n")
        if json_path:
            open(json_path, "w").close()

    def __call__(self, report: BenchReport) -> None:
        if self.path:
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerow(report.csv_row())
            with open(self.path, "a") as f:
                f.write(buf.getvalue())
        if self.json_path:
            with open(self.json_path, "a") as f:
                f.write(report.to_json() + "\n")
        print(
            f"{report.algorithm:14s} {report.dataset:28s} seed={report.seed} "
            f"recall={_fmt(report.recall_at_k)} fit={_fmt(report.fitting_rate)} "
            f"index_bytes={report.index_bytes}"
        )


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


# -- subcommands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    try:
        spec = DatasetSpec(args.kind, args.n, args.d, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_vectors(generate(spec), args.out, fmt=args.format)
    return 0


def cmd_build(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.data:
        raise UsageError("build needs --data")
    ds = _load(cfg.data)
    algs = cfg.algorithms()
    if len(algs) != 1:
        raise UsageError("build takes exactly one algorithm")
    alg = algs[0]
    if alg in ("llsh", "llsh-ensemble"):
        try:
            cfg.llsh_config(alg == "llsh-ensemble").validate_for(ds.dim)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    seed = cfg.seed_list()[0]
    built = build_algorithm(alg, ds, cfg, seed)
    report = BenchReport(
        algorithm=alg,
        dataset=f"{Path(cfg.data).name}(n={ds.n},d={ds.dim})",
        seed=seed,
        n=ds.n,
        d=ds.dim,
        n_queries=0,
        topk=cfg.topk,
        fitting_rate=built.fitting_rate,
        build_time_ns=built.build_time_ns,
        train_time_ns=built.train_time_ns,
        index_bytes=built.index_bytes,
        model_bytes=built.model_bytes,
        config={**cfg.echo(), "algorithm": alg},
    )
    if args.out:
        if alg == "e2lsh":
            Path(args.out).write_bytes(e2lsh.index_to_bytes(built.artifacts["index"]))
        elif alg.startswith("llsh"):
            Path(args.out).write_bytes(llsh.index_to_bytes(built.artifacts["index"]))
            model_path = args.model or args.out + ".llm1"
            Path(model_path).write_bytes(llsh.model_to_bytes(built.artifacts["model"], built.artifacts["config"]))
        else:
            print(f"note: {alg} is rebuilt per run and has no index file", file=sys.stderr)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def _open_index(path: str, ds: Dataset, model_path: str | None):
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    blob = p.read_bytes()
    try:
        if blob[:4] == e2lsh.E2LX_MAGIC:
            idx = e2lsh.index_from_bytes(blob, ds)
            return lambda q, k: e2lsh.query(idx, q, k)
        if blob[:4] == llsh.LLIX_MAGIC:
            mp = Path(model_path or path + ".llm1")
            if not mp.exists():
                raise DataError(f"no such file: {mp}")
            model, _ = llsh.model_from_bytes(mp.read_bytes())
            idx = llsh.index_from_bytes(blob, model, ds)
            return lambda q, k: llsh.query_llsh(idx, q, k)
    except ValueError as exc:
        raise DataError(f"{p}: {exc}") from None
    raise DataError(f"{p}: not an E2LX or LLIX index")


def cmd_query(args) -> int:
    if args.topk < 1:
        raise UsageError("topk must be positive")
    ds = _load(args.data)
    queries = _load(args.queries, dim=ds.dim)
    if args.index:
        search = _open_index(args.index, ds, args.model)
    else:
        alg = args.algorithm or "brute"
        if alg == "brute":
            search = lambda q, k: baselines.brute_knn(ds, q, k)
        elif alg == "kdtree":
            tree = baselines.build_kdtree(ds, baselines.DEFAULT_LEAF_SIZE)
            search = lambda q, k: baselines.query_kdtree(tree, q, k)
        elif alg == "balltree":
            tree = baselines.build_balltree(ds, baselines.DEFAULT_LEAF_SIZE)
            search = lambda q, k: baselines.query_balltree(tree, q, k)
        else:
            raise UsageError("query needs --index for hashing algorithms")
    lines = []
    for i, q in enumerate(queries.points):
        res = search(q, args.topk)
        lines.append(json.dumps({"query": int(queries.ids[i]), "neighbors": [[j, d] for j, d in res]}))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    run_bench(cfg, on_report=_RowWriter(args.out_csv, args.out_json))
    return 0


def inspect_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    blob = p.read_bytes()
    magic = blob[:4]
    try:
        if magic == b"LLSH":
            ds = read_vectors(p, fmt="llshbin")
            return {"type": "llshbin", "count": ds.n, "dim": ds.dim}
        if magic == e2lsh.E2LX_MAGIC:
            _, version, L, k, d, r, T = struct.unpack_from("<4sHIIIdQ", blob)
            tables = _tables_only(blob, e2lsh.E2LX_HEADER_BYTES + L * (k * d + k) * 8, L, k)
            return {"type": "E2LX", "version": version, "L": L, "k": k, "d": d, "r": r, "T": T,
                    "entries_per_table": [len(t) for t in tables], "entries": sum(len(t) for t in tables)}
        if magic == llsh.LLIX_MAGIC:
            _, version, L, k, d, T = struct.unpack_from("<4sHIIIQ", blob)
            tables = _tables_only(blob, llsh.LLIX_HEADER_BYTES, L, k)
            return {"type": "LLIX", "version": version, "L": L, "k": k, "d": d, "T": T,
                    "entries_per_table": [len(t) for t in tables], "entries": sum(len(t) for t in tables)}
        if magic == llsh.LLM_MAGIC:
            model, echo = llsh.model_from_bytes(blob)
            return {"type": "LLM1", "L": model.L, "k": model.k, "unit_sizes": model.units.sizes,
                    "encoder_sizes": model.encoder.sizes if model.encoder else None, "config": echo,
                    "bytes": len(blob)}
        if magic == b"MLP1":
            return {"type": "MLP1", "sizes": mlp_from_bytes(blob).sizes}
    except (ValueError, struct.error, VectorFormatError) as exc:
        raise DataError(f"{p}: {exc}") from None
    raise DataError(f"{p}: unrecognized file type {magic!r}")


def _tables_only(blob: bytes, offset: int, L: int, k: int) -> list:
    f = io.BytesIO(blob)
    f.seek(offset)
    e2lsh.read_hashers(f, L, k, 1)
    return e2lsh.read_tables(f, L)


def cmd_inspect(args) -> int:
    print(json.dumps(inspect_file(args.path), indent=2))
    return 0


# -- argument parsing ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags override it")
    for f in fields(RunConfig):
        kind = {"int": int, "float": float}.get(f.type, str)
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, type=kind, default=None)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="learnedlsh", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--kind", required=True, choices=KINDS)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--format", choices=("llshbin", "csv"), default=None)
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("build", help="build an index (and model) from a dataset file")
    _add_run_flags(b)
    b.add_argument("--out", help="index file (E2LX or LLIX)")
    b.add_argument("--model", help="model file for learned indexes (default: OUT.llm1)")
    b.add_argument("--report", help="write the build report as JSON")
    b.set_defaults(func=cmd_build)

    q = sub.add_parser("query", help="answer queries, one JSON line per query")
    q.add_argument("--data", required=True)
    q.add_argument("--queries", required=True)
    q.add_argument("--index")
    q.add_argument("--model")
    q.add_argument("--algorithm", choices=("brute", "kdtree", "balltree"))
    q.add_argument("--topk", type=int, default=10)
    q.add_argument("--out")
    q.set_defaults(func=cmd_query)

    be = sub.add_parser("bench", help="run the benchmark matrix and emit CSV/JSON rows")
    _add_run_flags(be)
    be.add_argument("--out-csv")
    be.add_argument("--out-json")
    be.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", help="summarize a dataset, index or model file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
