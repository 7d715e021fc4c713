"""Dense ReLU networks with hand-written backprop and Adam.

Every array in an :class:`Mlp` may carry one leading *stack* axis. A stacked
network of size ``S`` is ``S`` independent networks with identical shapes that
are evaluated and trained together in vectorized form: each network's loss,
gradients and Adam moments only ever touch its own slice, so the result is the
same as training them one by one.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

MLP_MAGIC = b"MLP1"
MLP_VERSION = 1


@dataclass
class Mlp:
    """Stack of dense layers, ReLU between layers, identity on the last one.

    ``weights[i]`` has shape ``(*stack, out, in)`` and ``biases[i]`` has shape
    ``(*stack, out)``. Hidden layers listed in ``linear`` skip the ReLU (an
    autoencoder's code layer, for instance).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    linear: frozenset[int] = frozenset()

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("an Mlp needs at least one layer and one bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim < 2 or b.shape != w.shape[:-1]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[-1] != self.weights[i - 1].shape[-2]:
                raise ValueError(f"layer {i} input width does not match layer {i - 1} output")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[-1]] + [w.shape[-2] for w in self.weights]

    @property
    def stack(self) -> tuple[int, ...]:
        return self.weights[0].shape[:-2]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.linear)

    def unit(self, j: int) -> "Mlp":
        """Network ``j`` of a stacked Mlp, as a standalone (copied) Mlp."""
        return Mlp([w[j].copy() for w in self.weights], [b[j].copy() for b in self.biases], self.linear)

    def layers(self, start: int, stop: int | None = None) -> "Mlp":
        """Layers ``start:stop`` as their own network (arrays shared, not copied)."""
        stop = len(self.weights) if stop is None else stop
        linear = frozenset(i - start for i in self.linear if start <= i < stop - 1)
        return Mlp(self.weights[start:stop], self.biases[start:stop], linear)

    def _relu_after(self, i: int) -> bool:
        return i != len(self.weights) - 1 and i not in self.linear


def init_mlp(
    sizes: list[int], rng: np.random.Generator, stack: tuple[int, ...] = (), linear: frozenset[int] = frozenset()
) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"invalid layer sizes {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(*stack, fan_out, fan_in)))
        biases.append(np.zeros((*stack, fan_out)))
    return Mlp(weights, biases, frozenset(linear))


def stack_mlps(nets: list[Mlp]) -> Mlp:
    """Combine unstacked networks of identical shape into one stacked Mlp."""
    if not nets:
        raise ValueError("nothing to stack")
    n_layers = len(nets[0].weights)
    return Mlp(
        [np.stack([n.weights[i] for n in nets]) for i in range(n_layers)],
        [np.stack([n.biases[i] for n in nets]) for i in range(n_layers)],
        nets[0].linear,
    )


def _check_input(net: Mlp, X: np.ndarray) -> None:
    if X.ndim < 2 or X.shape[-1] != net.sizes[0]:
        raise ValueError(f"input of shape {X.shape} does not fit a network with input width {net.sizes[0]}")


def _forward_cache(net: Mlp, X: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    # acts[i] is the input to layer i; pre[i] its pre-activation.
    acts, pre = [X], []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = acts[-1] @ np.swapaxes(w, -1, -2) + b[..., None, :]
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if net._relu_after(i) else z)
    return acts, pre


def forward(net: Mlp, X: np.ndarray) -> np.ndarray:
    """Evaluate the network on a batch.

    ``X`` is ``(B, in)``; for a stacked net it may also be ``(S, B, in)``.
    A shared ``(B, in)`` batch is broadcast across the stack.
    """
    X = np.asarray(X, dtype=np.float64)
    _check_input(net, X)
    return _forward_cache(net, X)[0][-1]


def mse_loss(Y: np.ndarray, T: np.ndarray) -> float:
    """Mean squared error over every scalar entry."""
    Y, T = np.asarray(Y, dtype=np.float64), np.asarray(T, dtype=np.float64)
    if Y.shape != T.shape:
        raise ValueError(f"prediction shape {Y.shape} != target shape {T.shape}")
    if Y.size == 0:
        return 0.0
    return float(np.mean((Y - T) ** 2))


def backward(net: Mlp, X: np.ndarray, T: np.ndarray) -> list[np.ndarray]:
    """Gradients of the MSE loss, ordered like :meth:`Mlp.params`.

    For a stacked net each network is differentiated against its own loss
    (the mean over its ``B * out`` entries), not the mean over the stack.
    """
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    _check_input(net, X)
    acts, pre = _forward_cache(net, X)
    Y = acts[-1]
    if Y.shape != T.shape:
        raise ValueError(f"output shape {Y.shape} != target shape {T.shape}")
    per_net = Y.shape[-2] * Y.shape[-1]
    delta = 2.0 * (Y - T) / per_net
    grads: list[np.ndarray] = []
    for i in range(len(net.weights) - 1, -1, -1):
        a_in = acts[i]
        gw = np.swapaxes(delta, -1, -2) @ a_in
        if gw.ndim > net.weights[i].ndim:
            # stacked input through an unstacked net
            gw = gw.sum(axis=tuple(range(gw.ndim - net.weights[i].ndim)))
        gb = delta.sum(axis=-2)
        if gb.ndim > net.biases[i].ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - net.biases[i].ndim)))
        grads += [gb, gw]
        if i:
            delta = delta @ net.weights[i]
            if net._relu_after(i - 1):
                delta = delta * (pre[i - 1] > 0)
    grads.reverse()
    return grads


def finite_diff_grad(net: Mlp, X: np.ndarray, T: np.ndarray, eps: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradients of ``mse_loss(forward(net, X), T)``.

    Test oracle only: one pair of forward passes per parameter. Stacked nets
    are not supported here because the loss would mix the stack.
    """
    if net.stack:
        raise ValueError("finite differences are defined for a single network")
    probe = net.copy()
    grads = []
    for p in probe.params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = mse_loss(forward(probe, X), T)
            flat[j] = orig - eps
            down = mse_loss(forward(probe, X), T)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1 or self.seed < 0:
            raise ValueError(f"invalid TrainConfig {self}")


@dataclass
class FitResult:
    epochs: int
    best_epoch: np.ndarray
    best_score: np.ndarray
    history: list[np.ndarray]


def fit(
    net: Mlp,
    X: np.ndarray,
    T: np.ndarray,
    cfg: TrainConfig,
    score: Callable[[Mlp], np.ndarray] | None = None,
) -> FitResult:
    """Minibatch Adam on MSE with per-network early stopping.

    ``score(net)`` returns one value per stacked network (a scalar for an
    unstacked net), higher is better. Each network keeps the parameters from
    its best-scoring epoch and stops improving once it has gone ``patience``
    epochs without a strictly better score. Without ``score`` the negated
    training loss is used. ``net`` is modified in place.

    Shuffling uses one generator per stacked network, seeded from
    ``(cfg.seed, index)``, so network ``j`` trains exactly as it would alone.
    """
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    stacked = bool(net.stack)
    if not stacked:
        # work on stacked views; in-place updates land in the caller's arrays
        view = Mlp([w[None] for w in net.weights], [b[None] for b in net.biases], net.linear)
        T = T[None]
        inner_score = (lambda _: np.atleast_1d(score(net))) if score else None
    else:
        view = net
        inner_score = score
    S = view.stack[0]
    n = X.shape[-2]
    if T.shape[:2] != (S, n):
        raise ValueError(f"targets {T.shape} do not match {S} networks x {n} rows")
    if inner_score is None:
        inner_score = lambda m: -np.mean((forward(m, X) - T) ** 2, axis=(-2, -1))

    rngs = [np.random.default_rng([cfg.seed, j]) for j in range(S)]
    params = view.params()
    opt = AdamState.for_params(params, lr=cfg.lr)
    best = [p.copy() for p in params]
    best_score = np.asarray(inner_score(view), dtype=np.float64).copy()
    best_epoch = np.zeros(S, dtype=np.int64)
    active = np.ones(S, dtype=bool)
    history = [best_score.copy()]
    rows = np.arange(S)[:, None]
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perms = np.stack([r.permutation(n) for r in rngs])
        for start in range(0, n, cfg.batch_size):
            idx = perms[:, start : start + cfg.batch_size]
            xb = X[idx] if X.ndim == 2 else X[rows, idx]
            grads = backward(view, xb, T[rows, idx])
            adam_step(opt, params, grads)
        s = np.asarray(inner_score(view), dtype=np.float64)
        history.append(s)
        improved = active & (s > best_score)
        if improved.any():
            best_score[improved] = s[improved]
            best_epoch[improved] = epoch
            for b, p in zip(best, params):
                b[improved] = p[improved]
        active &= epoch - best_epoch < cfg.patience
        if not active.any():
            break
    for b, p in zip(best, params):
        p[...] = b
    if not stacked:
        best_epoch, best_score = best_epoch[:1], best_score[:1]
    return FitResult(epochs=epoch, best_epoch=best_epoch, best_score=best_score, history=history)


def mlp_to_bytes(net: Mlp) -> bytes:
    """``MLP1`` blob: magic, u16 version, u32 layer count, u32 (in, out) per
    layer, then row-major little-endian f32 weights and biases per layer."""
    if net.stack:
        raise ValueError("serialize stacked networks one unit at a time")
    if net.linear:
        raise ValueError("MLP1 has no field for linear hidden layers")
    buf = io.BytesIO()
    buf.write(MLP_MAGIC)
    buf.write(struct.pack("<HI", MLP_VERSION, len(net.weights)))
    for w in net.weights:
        buf.write(struct.pack("<II", w.shape[1], w.shape[0]))
    for w, b in zip(net.weights, net.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return buf.getvalue()


def mlp_from_stream(f: io.BufferedIOBase) -> Mlp:
    if f.read(4) != MLP_MAGIC:
        raise ValueError("not an MLP1 blob")
    version, n_layers = struct.unpack("<HI", f.read(6))
    if version != MLP_VERSION:
        raise ValueError(f"unsupported MLP1 version {version}")
    dims = [struct.unpack("<II", f.read(8)) for _ in range(n_layers)]
    weights, biases = [], []
    for fan_in, fan_out in dims:
        w = np.frombuffer(f.read(4 * fan_in * fan_out), dtype="<f4").reshape(fan_out, fan_in)
        b = np.frombuffer(f.read(4 * fan_out), dtype="<f4")
        if b.size != fan_out:
            raise ValueError("truncated MLP1 blob")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return Mlp(weights, biases)


def mlp_from_bytes(data: bytes) -> Mlp:
    return mlp_from_stream(io.BytesIO(data))
