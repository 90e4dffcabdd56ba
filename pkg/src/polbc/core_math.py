"""Small dense numeric kernel: MLP with manual backprop, Adam, seeded RNG."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "identity")


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for ``seed``; ``keys`` select an independent substream.

    ``make_rng(s, 3)`` and ``make_rng(s, 4)`` never overlap, and equal arguments
    always give bit-identical streams.
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return list(rng.spawn(n))


def log_sum_exp(values) -> float:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    m = np.max(v)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def log_sum_exp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp of a 2-D array."""
    m = np.max(a, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        if not self.weights:
            raise ValueError("an Mlp needs at least one layer")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bad shapes {w.shape} / {b.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} does not chain")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: list[np.ndarray]) -> "Mlp":
        return Mlp(list(params[0::2]), list(params[1::2]), list(self.activations))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def from_flat(self, vec) -> "Mlp":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        params, i = [], 0
        for p in self.params():
            params.append(vec[i:i + p.size].reshape(p.shape).copy())
            i += p.size
        return self.with_params(params)

    def copy(self) -> "Mlp":
        return self.with_params([p.copy() for p in self.params()])


def init_mlp(sizes, activations, rng: np.random.Generator) -> Mlp:
    """Weights and biases uniform in +-1/sqrt(fan_in)."""
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Mlp(weights, biases, list(activations))


def zero_mlp(sizes, activations) -> Mlp:
    return Mlp(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
        list(activations),
    )


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"input shape {x.shape} does not match input dim {net.input_dim}")
    return x, single


def _forward_trace(net: Mlp, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = acts[-1] @ w + b
        acts.append(np.tanh(z) if act == "tanh" else z)
    return acts


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    xb, single = _as_batch(net, x)
    out = _forward_trace(net, xb)[-1]
    return out[0] if single else out


def mlp_backward(net: Mlp, x, output_grad) -> list[np.ndarray]:
    """Gradients of ``sum(output_grad * mlp_forward(net, x))`` w.r.t. every parameter.

    For a batch input the gradients are summed over rows. The returned list is
    ordered like ``net.params()``: ``[dW0, db0, dW1, db1, ...]``.
    """
    xb, single = _as_batch(net, x)
    g = np.asarray(output_grad, dtype=float)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], net.output_dim):
        raise ValueError(f"output_grad shape {g.shape} does not match output dim {net.output_dim}")
    acts = _forward_trace(net, xb)
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    for i in range(len(net.weights) - 1, -1, -1):
        if net.activations[i] == "tanh":
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[2 * i] = acts[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i:
            g = g @ net.weights[i].T
    return grads


def mlp_input_grad(net: Mlp, x, output_grad) -> np.ndarray:
    xb, single = _as_batch(net, x)
    g = np.asarray(output_grad, dtype=float).reshape(xb.shape[0], net.output_dim)
    acts = _forward_trace(net, xb)
    for i in range(len(net.weights) - 1, -1, -1):
        if net.activations[i] == "tanh":
            g = g * (1.0 - acts[i + 1] ** 2)
        g = g @ net.weights[i].T
    return g[0] if single else g


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls([np.zeros_like(p, dtype=float) for p in params],
                   [np.zeros_like(p, dtype=float) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam descent step. Returns new params and a new state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and Adam state disagree in length")
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=float)
        if g.shape != np.shape(p) or m.shape != g.shape:
            raise ValueError(f"shape mismatch {np.shape(p)} / {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient passed to adam_step")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)
