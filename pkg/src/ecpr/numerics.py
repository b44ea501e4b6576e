"""Dense float64 math, layer passes, Adam and a finite-difference checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every model in
the package hand-codes its backward pass on top of the helpers here.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

PROB_EPS = 1e-7


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# random streams


@dataclass(frozen=True)
class RngStream:
    """A named, seeded random stream.

    ``(seed, label, counter)`` fully determines the draws, independent of the
    platform and of any other stream.
    """

    seed: int
    label: str
    counter: int = 0

    def _key(self) -> list[int]:
        digest = hashlib.sha256(self.label.encode("utf-8")).digest()
        return [self.seed & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest[:8], "little"), self.counter]

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._key())))

    def child(self, label: str, counter: int = 0) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{label}", counter)

    def at(self, counter: int) -> "RngStream":
        return RngStream(self.seed, self.label, counter)


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform draws from the open interval (0, 1); endpoints are rejected."""
    u = rng.random(size)
    bad = u <= 0.0
    while np.any(bad):
        u[bad] = rng.random(int(bad.sum()))
        bad = u <= 0.0
    return u


# ---------------------------------------------------------------------------
# parameters


class ParameterSet(Mapping[str, np.ndarray]):
    """Named float64 tensors iterated in lexicographic name order."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._data: dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {arr.shape}")
        self._data[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._data))

    def __len__(self) -> int:
        return len(self._data)

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet({k: np.zeros_like(v) for k, v in self._data.items()})

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self._data.items()})

    def size(self) -> int:
        return sum(v.size for v in self._data.values())


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def he_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    """Variance-preserving init for layers followed by a ReLU."""
    limit = math.sqrt(6.0 / n_in)
    return rng.uniform(-limit, limit, size=(n_in, n_out))


# ---------------------------------------------------------------------------
# elementwise functions


def sigmoid(x):
    """Logistic function, stable for arbitrarily large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def bce_loss(y, yhat):
    """Binary cross-entropy with the prediction clamped to [eps, 1-eps]."""
    yhat = np.asarray(yhat, dtype=np.float64)
    if np.any(~np.isfinite(yhat)) or np.any(yhat < 0.0) or np.any(yhat > 1.0):
        raise ValueError("bce_loss: prediction outside [0, 1]")
    y = np.asarray(y, dtype=np.float64)
    p = clamp_prob(yhat)
    out = -y * np.log(p) - (1.0 - y) * np.log1p(-p)
    return out if out.ndim else float(out)


def bce_grad(y, yhat) -> np.ndarray:
    """d bce / d yhat, zero where the clamp is active."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = clamp_prob(yhat)
    g = -y / p + (1.0 - y) / (1.0 - p)
    return np.where((yhat < PROB_EPS) | (yhat > 1.0 - PROB_EPS), 0.0, g)


def bce_logit_grad(y, yhat) -> np.ndarray:
    """d bce(y, sigmoid(l)) / d l expressed through ``yhat = sigmoid(l)``."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    clamped = (yhat < PROB_EPS) | (yhat > 1.0 - PROB_EPS)
    return np.where(clamped, 0.0, yhat - y)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent_loss(label_index, logits):
    """``-log softmax(logits)[label]``; works on a vector or a batch of rows."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(label_index)
    n_classes = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError(f"label index out of range for {n_classes} classes")
    lsm = log_softmax(logits)
    if logits.ndim == 1:
        return float(-lsm[int(labels)])
    return -lsm[np.arange(len(labels)), labels]


def softmax_xent_grad(label_index, logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    g = softmax(logits)
    if logits.ndim == 1:
        g[int(label_index)] -= 1.0
    else:
        g[np.arange(len(g)), np.asarray(label_index)] -= 1.0
    return g


# ---------------------------------------------------------------------------
# layers


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise DimensionError(
            f"affine_forward: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)} incompatible"
        )
    return x @ W + b


def affine_backward(x: np.ndarray, W: np.ndarray, dout: np.ndarray):
    """Returns ``(dx, dW, db)`` for ``out = x @ W + b``."""
    return dout @ W.T, x.T @ dout, dout.sum(axis=0, keepdims=True)


def pairwise_sum(stack: np.ndarray) -> np.ndarray:
    """Sum along axis 0 by a fixed pairwise tree."""
    while stack.shape[0] > 1:
        n = stack.shape[0]
        half = stack[0 : n - n % 2 : 2] + stack[1 : n - n % 2 : 2]
        stack = np.concatenate([half, stack[n - 1 :]], axis=0) if n % 2 else half
    return stack[0]


@dataclass
class Mlp:
    """Stack of ReLU affine layers sharing a name prefix in a ParameterSet.

    ``final_linear`` leaves the last layer without activation.
    """

    prefix: str
    sizes: list[int]
    final_linear: bool = False

    def init(self, params: ParameterSet, rng: np.random.Generator) -> None:
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            linear = self.final_linear and i == self.n_layers - 1
            params[f"{self.prefix}.W{i}"] = (glorot_uniform if linear else he_uniform)(rng, a, b)
            params[f"{self.prefix}.b{i}"] = np.zeros((1, b))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, params: Mapping[str, np.ndarray], x: np.ndarray):
        acts = [x]
        for i in range(self.n_layers):
            h = affine_forward(acts[-1], params[f"{self.prefix}.W{i}"], params[f"{self.prefix}.b{i}"])
            if not (self.final_linear and i == self.n_layers - 1):
                h = relu(h)
            acts.append(h)
        return acts[-1], acts

    def backward(self, params, grads, acts, dout: np.ndarray) -> np.ndarray:
        for i in reversed(range(self.n_layers)):
            if not (self.final_linear and i == self.n_layers - 1):
                dout = dout * (acts[i + 1] > 0)
            W = params[f"{self.prefix}.W{i}"]
            dx, dW, db = affine_backward(acts[i], W, dout)
            grads[f"{self.prefix}.W{i}"] += dW
            grads[f"{self.prefix}.b{i}"] += db
            dout = dx
        return dout


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update with bias correction."""
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in params:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        # zero-gradient coordinates stay fixed (sparse embedding rows)
        nz = g != 0.0
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p = params[name]
        p -= np.where(nz, update, 0.0)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    loss_fn: Callable[[ParameterSet], float],
    params: ParameterSet,
    grads: Mapping[str, np.ndarray],
    step: float = 1e-5,
    coords: Mapping[str, np.ndarray] | None = None,
    scales: Sequence[float] = (1.0, 10.0, 0.1, 0.01),
) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    ``coords`` optionally restricts the check to flat indices per tensor;
    by default every coordinate is checked. A coordinate that disagrees is
    retried at the other ``scales`` of ``step`` and the best agreement is kept:
    larger steps rescue tiny gradients from roundoff, smaller ones step over a
    ReLU kink lying within one step of the evaluation point.
    """
    worst = 0.0
    for name in params:
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size) if coords is None else coords.get(name, np.arange(0))
        g_an = grads[name].reshape(-1)
        for k in idx:
            orig = flat[k]
            best = math.inf
            for scale in scales:
                h = step * scale
                flat[k] = orig + h
                lp = loss_fn(params)
                flat[k] = orig - h
                lm = loss_fn(params)
                flat[k] = orig
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise TrainingError(f"non-finite loss while perturbing {name}[{k}]")
                g_fd = (lp - lm) / (2.0 * h)
                best = min(best, abs(g_an[k] - g_fd) / max(1e-8, abs(g_an[k]) + abs(g_fd)))
                if best < 1e-6:
                    break
            worst = max(worst, best)
    return worst
