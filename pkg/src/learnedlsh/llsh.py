"""Learned LSH: small networks trained to reproduce E2LSH signatures.

Pipeline:

1. an autoencoder compresses ``d``-dim vectors to an ``m2``-dim code;
2. E2LSH with ``L`` families of ``k`` functions hashes the codes, giving an
   ``n x (L*k)`` integer label matrix (optionally averaged over several
   independent E2LSH draws);
3. ``L`` independent units ``m2 -> m3 -> k`` are fitted to their own ``k``
   label columns by MSE on standardized labels;
4. predicted signatures are bucket-hashed into ``L`` tables exactly as in
   E2LSH, and queries re-rank candidates by distance in the original space.
"""

from __future__ import annotations

import io
import json
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import e2lsh
from .baselines import Neighbors
from .e2lsh import BucketHasher, HashFamily, HashTable
from .neural import (
    Mlp,
    TrainConfig,
    fit,
    forward,
    init_mlp,
    mlp_from_stream,
    mlp_to_bytes,
    mse_loss,
    stack_mlps,
)
from .vecdata import Dataset, split

LLM_MAGIC = b"LLM1"
LLIX_MAGIC = b"LLIX"
FORMAT_VERSION = 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


@dataclass(frozen=True)
class LlshConfig:
    M: int = 2
    L: int = 30
    k: int = 10
    m1: int = 32
    m2: int = 16
    m3: int = 8
    r: float = 4.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-3, batch_size=64, max_epochs=200, patience=20))
    ae_train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, batch_size=64, max_epochs=30, patience=5))
    ensemble_size: int = 1
    # std of every code column after the autoencoder is put in canonical form
    code_scale: float = 0.5
    # share of the training rows kept aside for early stopping
    val_fraction: float = 0.1

    def __post_init__(self):
        if min(self.M, self.L, self.k, self.m1, self.m2, self.m3, self.ensemble_size) < 1:
            raise ValueError(f"all sizes must be positive: {self}")
        if self.r <= 0 or self.code_scale <= 0 or not 0 < self.val_fraction < 1:
            raise ValueError(f"r, code_scale must be positive and val_fraction in (0,1): {self}")

    def unit_sizes(self) -> list[int]:
        return [self.m2] + [self.m3] * (self.M - 1) + [self.k]

    def validate_for(self, d: int) -> None:
        """Raise on a bad autoencoder shape; warn when the learned model is not smaller than E2LSH."""
        if not d > self.m1 > self.m2:
            raise ValueError(f"autoencoder widths must shrink: need d > m1 > m2, got {d} > {self.m1} > {self.m2}")
        p1, p2 = param_count(self, d)
        if p1 >= p2:
            warnings.warn(f"learned model has {p1} parameters, not fewer than E2LSH's {p2}", stacklevel=2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LlshConfig":
        data = dict(data)
        data["train"] = TrainConfig(**data["train"])
        data["ae_train"] = TrainConfig(**data["ae_train"])
        return cls(**data)


def param_count(cfg: LlshConfig, d: int) -> tuple[int, int]:
    """Weight counts (biases excluded) of the learned model and of plain E2LSH.

    For two-layer units: ``p1 = d*m1 + m1*m2 + (m2*m3 + m3*k)*L`` and
    ``p2 = d*k*L``.
    """
    sizes = cfg.unit_sizes()
    per_unit = sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))
    return d * cfg.m1 + cfg.m1 * cfg.m2 + per_unit * cfg.L, d * cfg.k * cfg.L


# -- autoencoder -------------------------------------------------------------


@dataclass
class Autoencoder:
    encoder: Mlp
    decoder: Mlp | None = None
    initial_loss: float = float("nan")
    final_loss: float = float("nan")

    @property
    def code_dim(self) -> int:
        return self.encoder.sizes[-1]


def _fold_affine_input(net: Mlp, shift: np.ndarray, scale: np.ndarray) -> None:
    # net(x) -> net((x - shift) / scale)
    w0 = net.weights[0] / scale
    net.biases[0] = net.biases[0] - w0 @ shift
    net.weights[0] = w0


def _fold_affine_output(net: Mlp, shift: np.ndarray, scale: np.ndarray) -> None:
    # net(x) -> net(x) * scale + shift
    net.weights[-1] = net.weights[-1] * scale[:, None]
    net.biases[-1] = net.biases[-1] * scale + shift


def train_autoencoder(ds: Dataset, cfg: LlshConfig, seed: int = 0) -> Autoencoder:
    """Fit ``d -> m1 -> m2 -> m1 -> d`` to reconstruct ``ds``; the code layer is linear.

    Afterwards the code is put in canonical form (every code column zero-mean
    with std ``cfg.code_scale`` on the training data) by folding an affine map
    into the encoder's last layer and its inverse into the decoder's first, so
    reconstruction is unchanged.
    """
    d = ds.dim
    if not d > cfg.m1 > cfg.m2:
        raise ValueError(f"autoencoder widths must shrink: need d > m1 > m2, got {d} > {cfg.m1} > {cfg.m2}")
    X = ds.points.astype(np.float64)

    seeds = np.random.SeedSequence([seed, 0xAE]).spawn(3)
    ae = init_mlp([d, cfg.m1, cfg.m2, cfg.m1, d], np.random.default_rng(seeds[0]), linear=frozenset({1}))
    train_rows, val_rows = _val_split(ds.n, cfg.val_fraction, seeds[1])
    Xt, Xv = X[train_rows], X[val_rows]
    initial = mse_loss(forward(ae, X), X)
    score = (lambda m: -mse_loss(forward(m, Xv), Xv)) if len(val_rows) else None
    tcfg = replace(cfg.ae_train, seed=int(seeds[2].generate_state(1)[0]))
    fit(ae, Xt, Xt, tcfg, score=score)

    encoder = ae.layers(0, 2)
    decoder = ae.layers(2)
    code = forward(encoder, X)
    c_mu = code.mean(axis=0)
    c_sd = code.std(axis=0)
    c_sd[c_sd == 0] = 1.0
    scale = cfg.code_scale / c_sd
    _fold_affine_output(encoder, -c_mu * scale, scale)
    _fold_affine_input(decoder, -c_mu * scale, scale)

    final = mse_loss(forward(decoder, forward(encoder, X)), X)
    return Autoencoder(encoder, decoder, initial_loss=initial, final_loss=final)


def _val_split(n: int, fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(np.floor(fraction * n + 0.5)) if n >= 10 else 0
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def encode(ae: Autoencoder | Mlp, ds: Dataset) -> Dataset:
    encoder = ae.encoder if isinstance(ae, Autoencoder) else ae
    if ds.dim != encoder.sizes[0]:
        raise ValueError(f"dataset dimension {ds.dim} does not match encoder input {encoder.sizes[0]}")
    if ds.n == 0:
        return Dataset(np.zeros((0, encoder.sizes[-1]), np.float32), ds.ids)
    return Dataset(forward(encoder, ds.points).astype(np.float32), ds.ids)


# -- labels --------------------------------------------------------------------


def make_labels(encoded: Dataset, cfg: LlshConfig, seed: int = 0) -> tuple[np.ndarray, list[HashFamily]]:
    """E2LSH signatures of the codes: ``(n, L*k)`` labels and the ``L`` families."""
    families = [e2lsh.sample_family(encoded.dim, cfg.k, cfg.r, rng) for rng in e2lsh.table_streams(seed, cfg.L)]
    if encoded.n == 0:
        return np.zeros((0, cfg.L * cfg.k), np.int64), families
    labels = np.concatenate([e2lsh.hash_family(g, encoded.points) for g in families], axis=1)
    return labels, families


def ensemble_seeds(seed: int, size: int) -> list[int]:
    """Instance 0 reuses ``seed`` so a one-member ensemble is the basic pipeline."""
    derived = np.random.SeedSequence([seed, 0xE5]).generate_state(max(size - 1, 0), dtype=np.uint64)
    return [seed] + [int(s) for s in derived]


def make_ensemble_labels(
    encoded: Dataset, cfg: LlshConfig, seed: int = 0, seeds: list[int] | None = None
) -> tuple[np.ndarray, list[list[HashFamily]]]:
    """Average ``ensemble_size`` independent label blocks, rounding half away from zero."""
    if cfg.ensemble_size < 1:
        raise ValueError("ensemble_size must be at least 1")
    seeds = ensemble_seeds(seed, cfg.ensemble_size) if seeds is None else list(seeds)
    if len(seeds) != cfg.ensemble_size:
        raise ValueError(f"{len(seeds)} seeds for an ensemble of {cfg.ensemble_size}")
    blocks, family_sets = [], []
    for s in seeds:
        labels, families = make_labels(encoded, cfg, s)
        blocks.append(labels)
        family_sets.append(families)
    if len(blocks) == 1:
        return blocks[0], family_sets
    mean = np.mean(np.stack(blocks).astype(np.float64), axis=0)
    return round_half_away(mean), family_sets


# -- units -----------------------------------------------------------------------


@dataclass
class LlshModel:
    units: Mlp  # stacked over L
    label_mean: np.ndarray  # (L*k,)
    label_std: np.ndarray  # (L*k,)
    encoder: Mlp | None = None
    degenerate_columns: list[int] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)

    @property
    def L(self) -> int:
        return self.units.stack[0]

    @property
    def k(self) -> int:
        return self.units.sizes[-1]


def _unit_seeds(seed: int, L: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence([seed, 0x0A]).spawn(L)


def _unit_fitting_rates(units: Mlp, mean: np.ndarray, std: np.ndarray, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    L, k = units.stack[0], units.sizes[-1]
    pred = _predict(units, mean, std, X)  # (n, L*k)
    hits = (pred == labels).reshape(-1, L, k)
    return hits.mean(axis=(0, 2))


def train_llsh(encoded: Dataset, labels: np.ndarray, cfg: LlshConfig, seed: int = 0) -> LlshModel:
    """Train the ``L`` units, each on its own ``k`` standardized label columns.

    Early stopping is per unit, on its fitting rate over a validation share of
    the rows. Units are trained side by side as one stacked network; each
    unit's initialization and shuffling come from its own seed, so the result
    for a unit does not depend on the others.
    """
    labels = np.asarray(labels)
    n, width = labels.shape
    if width != cfg.L * cfg.k or n != encoded.n:
        raise ValueError(f"labels {labels.shape} do not match {encoded.n} rows x L*k={cfg.L * cfg.k}")
    if encoded.dim != cfg.m2:
        raise ValueError(f"encoded dimension {encoded.dim} != m2={cfg.m2}")
    mean = labels.mean(axis=0).astype(np.float64)
    std = labels.std(axis=0).astype(np.float64)
    degenerate = [int(c) for c in np.flatnonzero(std == 0)]
    std[std == 0] = 1.0

    unit_seeds = _unit_seeds(seed, cfg.L)
    units = stack_mlps([init_mlp(cfg.unit_sizes(), np.random.default_rng(s)) for s in unit_seeds])
    split_seed, shuffle_seed = np.random.SeedSequence([seed, 0x0B]).spawn(2)
    train_rows, val_rows = _val_split(n, cfg.val_fraction, split_seed)
    X = encoded.points.astype(np.float64)
    targets = ((labels - mean) / std).reshape(n, cfg.L, cfg.k).transpose(1, 0, 2)
    Xv, Yv = X[val_rows], labels[val_rows]
    score = None
    if len(val_rows):
        score = lambda m: _unit_fitting_rates(m, mean, std, Xv, Yv)
    tcfg = replace(cfg.train, seed=int(shuffle_seed.generate_state(1)[0]))
    result = fit(units, X[train_rows], targets[:, train_rows], tcfg, score=score)
    # a constant column's standardized target is 0 everywhere; its output row
    # touches no other column, so zero weights and bias are its exact optimum
    for c in degenerate:
        j, i = divmod(c, cfg.k)
        units.weights[-1][j, i] = 0.0
        units.biases[-1][j, i] = 0.0
    return LlshModel(units, mean, std, degenerate_columns=degenerate, epochs=result.best_epoch.tolist())


def _predict(units: Mlp, mean: np.ndarray, std: np.ndarray, X: np.ndarray) -> np.ndarray:
    out = forward(units, X)  # (L, n, k)
    flat = out.transpose(1, 0, 2).reshape(X.shape[0], -1)
    return round_half_away(flat * std + mean)


def predict_hash(model: LlshModel, v) -> np.ndarray:
    """``(L, k)`` integer signature of one code vector, or ``(n, L, k)`` for a batch."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    X = v[None, :] if single else v
    if X.ndim != 2 or X.shape[1] != model.units.sizes[0]:
        raise ValueError(f"input of shape {v.shape} for units of input width {model.units.sizes[0]}")
    pred = _predict(model.units, model.label_mean, model.label_std, X).reshape(-1, model.L, model.k)
    return pred[0] if single else pred


def predict_labels(model: LlshModel, encoded: Dataset) -> np.ndarray:
    """Predictions laid out like :func:`make_labels` output, ``(n, L*k)``."""
    return predict_hash(model, encoded.points.astype(np.float64)).reshape(encoded.n, -1)


# -- index -------------------------------------------------------------------------


@dataclass(frozen=True)
class LlshIndex:
    model: LlshModel
    hashers: list[BucketHasher]
    tables: list[HashTable]
    ds: Dataset

    @property
    def n_entries(self) -> int:
        return sum(len(t) for t in self.tables)


def build_llsh_index(model: LlshModel, ds: Dataset, seed: int = 0, encoded: Dataset | None = None) -> LlshIndex:
    """Index the raw dataset ``ds`` under the model's predicted signatures.

    ``encoded`` may be passed when the codes are already known; otherwise the
    model's encoder is applied.
    """
    if encoded is None:
        if model.encoder is None:
            raise ValueError("model has no encoder; pass the encoded dataset")
        encoded = encode(model.encoder, ds)
    if encoded.n != ds.n or not np.array_equal(encoded.ids, ds.ids):
        raise ValueError("encoded dataset does not match the raw dataset")
    T = max(ds.n, 1)
    hashers = [e2lsh.sample_hasher(model.k, T, rng) for rng in e2lsh.table_streams(seed, model.L)]
    pred = predict_hash(model, encoded.points.astype(np.float64)) if ds.n else np.zeros((0, model.L, model.k), np.int64)
    signatures = [pred[:, j, :] for j in range(model.L)]
    tables = e2lsh.build_tables(signatures, hashers, ds.ids)
    return LlshIndex(model, hashers, tables, ds)


def query_llsh(idx: LlshIndex, q, topk: int, ae: Autoencoder | None = None) -> Neighbors:
    """Encode ``q``, predict its signatures, and re-rank matching points by raw distance."""
    if topk < 1:
        raise ValueError(f"topk must be positive, got {topk}")
    encoder = ae.encoder if ae is not None else idx.model.encoder
    if encoder is None:
        raise ValueError("no encoder available for raw queries")
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (idx.ds.dim,):
        raise ValueError(f"query has shape {q.shape}, expected ({idx.ds.dim},)")
    code = forward(encoder, q[None, :].astype(np.float64)).astype(np.float32)[0]
    sig = predict_hash(idx.model, code)
    cand = e2lsh.gather_candidates(idx.tables, idx.hashers, list(sig))
    return e2lsh.rank_candidates(idx.ds, cand, q, topk)


# -- end-to-end ----------------------------------------------------------------------


@dataclass
class LlshBuild:
    """Everything produced by :func:`build_pipeline`."""

    autoencoder: Autoencoder
    model: LlshModel
    index: LlshIndex
    families: list[list[HashFamily]]
    fitting_rate: float | None
    train_time_ns: int = 0
    build_time_ns: int = 0


def build_pipeline(
    ds: Dataset, cfg: LlshConfig, seed: int = 0, holdout_fraction: float = 0.1
) -> LlshBuild:
    """Train on ``1 - holdout_fraction`` of ``ds``, report the holdout fitting
    rate, and index all of ``ds``."""
    from .evaluation import fitting_rate  # evaluation imports this module

    cfg.validate_for(ds.dim)
    s_split, s_ae, s_lab, s_unit, s_idx = (int(x) for x in np.random.SeedSequence([seed, 0x11]).generate_state(5))
    t0 = time.perf_counter_ns()
    if ds.n >= 2 and holdout_fraction > 0:
        train, hold = split(ds, holdout_fraction, s_split)
    else:
        train, hold = ds, Dataset(np.zeros((0, ds.dim), np.float32), [])
    ae = train_autoencoder(train, cfg, s_ae)
    enc_train = encode(ae, train)
    labels, families = make_ensemble_labels(enc_train, cfg, s_lab)
    model = train_llsh(enc_train, labels, cfg, s_unit)
    model.encoder = ae.encoder
    rate = None
    if hold.n:
        enc_hold = encode(ae, hold)
        hold_labels, _ = make_ensemble_labels(enc_hold, cfg, s_lab)
        rate = fitting_rate(predict_labels(model, enc_hold), hold_labels)
    t1 = time.perf_counter_ns()
    index = build_llsh_index(model, ds, s_idx)
    t2 = time.perf_counter_ns()
    return LlshBuild(ae, model, index, families, rate, train_time_ns=t1 - t0, build_time_ns=t2 - t1)


# -- serialization ----------------------------------------------------------------------


def model_to_bytes(model: LlshModel, cfg: LlshConfig | None = None) -> bytes:
    """``LLM1`` blob: magic, u16 version, u32 config-echo length + JSON, u8
    encoder flag + ``MLP1`` encoder, u32 L + ``L`` ``MLP1`` unit blobs, then
    label mean and std as f64."""
    echo = json.dumps(cfg.to_dict() if cfg else {}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(LLM_MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(echo)))
    buf.write(echo)
    buf.write(struct.pack("<B", model.encoder is not None))
    if model.encoder is not None:
        buf.write(mlp_to_bytes(model.encoder))
    buf.write(struct.pack("<I", model.L))
    for j in range(model.L):
        buf.write(mlp_to_bytes(model.units.unit(j)))
    buf.write(model.label_mean.astype("<f8").tobytes())
    buf.write(model.label_std.astype("<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> tuple[LlshModel, dict]:
    f = io.BytesIO(data)
    if f.read(4) != LLM_MAGIC:
        raise ValueError("not an LLM1 model")
    version, echo_len = struct.unpack("<HI", f.read(6))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported LLM1 version {version}")
    echo = json.loads(f.read(echo_len).decode() or "{}")
    (has_encoder,) = struct.unpack("<B", f.read(1))
    encoder = mlp_from_stream(f) if has_encoder else None
    (L,) = struct.unpack("<I", f.read(4))
    units = stack_mlps([mlp_from_stream(f) for _ in range(L)])
    width = L * units.sizes[-1]
    mean = np.frombuffer(f.read(8 * width), dtype="<f8").astype(np.float64)
    std = np.frombuffer(f.read(8 * width), dtype="<f8").astype(np.float64)
    if mean.size != width or std.size != width:
        raise ValueError("truncated LLM1 model")
    return LlshModel(units, mean, std, encoder=encoder), echo


_LLIX_HEAD = struct.Struct("<4sHIIIQ")  # magic, version, L, k, d, T
LLIX_HEADER_BYTES = _LLIX_HEAD.size


def index_to_bytes(idx: LlshIndex) -> bytes:
    """``LLIX`` blob: header, u32 bucket coefficients, tables as in ``E2LX``.
    The model and dataset are stored separately."""
    T = idx.hashers[0].table_size if idx.hashers else 1
    buf = io.BytesIO()
    buf.write(_LLIX_HEAD.pack(LLIX_MAGIC, FORMAT_VERSION, idx.model.L, idx.model.k, idx.ds.dim, T))
    e2lsh.write_hashers(buf, idx.hashers)
    e2lsh.write_tables(buf, idx.tables)
    return buf.getvalue()


def index_from_bytes(data: bytes, model: LlshModel, ds: Dataset) -> LlshIndex:
    f = io.BytesIO(data)
    head = f.read(_LLIX_HEAD.size)
    if len(head) != _LLIX_HEAD.size:
        raise ValueError("truncated LLIX index")
    magic, version, L, k, d, T = _LLIX_HEAD.unpack(head)
    if magic != LLIX_MAGIC or version != FORMAT_VERSION:
        raise ValueError("not an LLIX v1 index")
    if (L, k) != (model.L, model.k):
        raise ValueError(f"index expects L={L}, k={k}; model has L={model.L}, k={model.k}")
    if d != ds.dim:
        raise ValueError(f"index was built for dimension {d}, dataset has {ds.dim}")
    hashers = e2lsh.read_hashers(f, L, k, T)
    tables = e2lsh.read_tables(f, L)
    return LlshIndex(model, hashers, tables, ds)
