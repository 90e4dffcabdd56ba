"""Comparison characterizations: single Gaussian, discretization, discriminator."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_math import AdamState, Mlp, adam_step, init_mlp, mlp_backward, mlp_forward, sigmoid
from .gmm import VARIANCE_FLOOR, StateDataset
from .supervector import DistanceMatrix, default_ids, pool_datasets

N_BINS = 10
LOGIT_CLIP = 10.0


# -- single Gaussian ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianBc:
    mean: np.ndarray
    var: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"type": "gaussian_bc", "mean": self.mean.tolist(),
                           "var": self.var.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "GaussianBc":
        doc = json.loads(text)
        if doc.get("type") != "gaussian_bc":
            raise ValueError("not a gaussian_bc document")
        return cls(np.asarray(doc["mean"], float), np.asarray(doc["var"], float))


def fit_gaussian_bc(data, floor: float = VARIANCE_FLOOR) -> GaussianBc:
    """Sample mean and floored population variance per dimension."""
    x = data.states if isinstance(data, StateDataset) else np.atleast_2d(np.asarray(data, float))
    if x.shape[0] < 2:
        raise ValueError("a Gaussian needs at least two states")
    return GaussianBc(x.mean(axis=0), np.maximum(x.var(axis=0), floor))


def gaussian_symmetric_kl(a: GaussianBc, b: GaussianBc) -> float:
    if a.mean.shape != b.mean.shape:
        raise ValueError("Gaussians have different dimensions")
    diff2 = (a.mean - b.mean) ** 2
    terms = a.var / b.var + b.var / a.var - 2.0 + diff2 * (1.0 / a.var + 1.0 / b.var)
    return float(max(0.5 * np.sum(terms), 0.0))


def gaussian_distance_matrix(datasets: Sequence[StateDataset], ids=None) -> DistanceMatrix:
    bcs = [fit_gaussian_bc(ds) for ds in datasets]
    n = len(bcs)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = gaussian_symmetric_kl(bcs[i], bcs[j])
    return DistanceMatrix(m, ids if ids is not None else default_ids(n))


# -- discretization ----------------------------------------------------------

def compute_bin_edges(pooled, n_bins: int = N_BINS) -> list[np.ndarray]:
    """Uniform bins over the observed range of every dimension.

    A constant dimension gets the degenerate edge pair ``[v, v]`` (one bin).
    """
    x = pooled.states if isinstance(pooled, StateDataset) else np.atleast_2d(np.asarray(pooled, float))
    if x.shape[0] == 0:
        raise ValueError("cannot bin an empty dataset")
    edges = []
    for lo, hi in zip(x.min(axis=0), x.max(axis=0)):
        edges.append(np.array([lo, hi]) if lo == hi else np.linspace(lo, hi, n_bins + 1))
    return edges


def _cells(x: np.ndarray, edges: Sequence[np.ndarray]) -> np.ndarray:
    # half-open bins, last bin closed; out-of-range values land in the edge bins
    cols = [np.searchsorted(e[1:-1], x[:, j], side="right") for j, e in enumerate(edges)]
    return np.stack(cols, axis=1)


@dataclass(frozen=True, eq=False)
class HistogramBc:
    edges: tuple
    probs: dict = field(default_factory=dict)

    def same_edges(self, other: "HistogramBc") -> bool:
        return len(self.edges) == len(other.edges) and all(
            np.array_equal(a, b) for a, b in zip(self.edges, other.edges))

    def to_json(self) -> str:
        cells = [[list(c), p] for c, p in sorted(self.probs.items())]
        return json.dumps({"type": "histogram_bc", "edges": [e.tolist() for e in self.edges],
                           "cells": cells})

    @classmethod
    def from_json(cls, text: str) -> "HistogramBc":
        doc = json.loads(text)
        if doc.get("type") != "histogram_bc":
            raise ValueError("not a histogram_bc document")
        return cls(tuple(np.asarray(e, float) for e in doc["edges"]),
                   {tuple(int(i) for i in c): float(p) for c, p in doc["cells"]})


def fit_histogram_bc(data, edges: Sequence[np.ndarray]) -> HistogramBc:
    """Sparse normalized visit counts; memory grows with occupied cells only."""
    x = data.states if isinstance(data, StateDataset) else np.atleast_2d(np.asarray(data, float))
    if x.shape[1] != len(edges):
        raise ValueError(f"data dim {x.shape[1]} does not match {len(edges)} edge arrays")
    if x.shape[0] == 0:
        raise ValueError("cannot fit a histogram on no states")
    cells, counts = np.unique(_cells(x, edges), axis=0, return_counts=True)
    total = counts.sum()
    probs = {tuple(int(i) for i in c): n / total for c, n in zip(cells, counts)}
    return HistogramBc(tuple(np.asarray(e) for e in edges), probs)


def histogram_distance(a: HistogramBc, b: HistogramBc) -> float:
    if not a.same_edges(b):
        raise ValueError("histograms were built on different bin edges")
    keys = set(a.probs) | set(b.probs)
    total = sum(abs(a.probs.get(k, 0.0) - b.probs.get(k, 0.0)) for k in sorted(keys))
    return float(min(max(0.5 * total, 0.0), 1.0))


def histogram_distance_matrix(datasets: Sequence[StateDataset], ids=None) -> DistanceMatrix:
    edges = compute_bin_edges(pool_datasets(datasets))
    bcs = [fit_histogram_bc(ds, edges) for ds in datasets]
    n = len(bcs)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = histogram_distance(bcs[i], bcs[j])
    return DistanceMatrix(m, ids if ids is not None else default_ids(n))


# -- discriminator -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiscriminatorBc:
    """A trained own-vs-others classifier. Inputs are standardized first."""

    net: Mlp
    shift: np.ndarray
    scale: np.ndarray
    clip: float = LOGIT_CLIP

    def logits(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        z = mlp_forward(self.net, (x - self.shift) / self.scale)[:, 0]
        return np.clip(z, -self.clip, self.clip)

    def prob(self, x) -> np.ndarray:
        return sigmoid(self.logits(x))

    def inverse_ratio(self, x) -> np.ndarray:
        """(1 - D) / D, i.e. how much likelier the state is under the other policies."""
        return np.exp(-self.logits(x))


def train_discriminator(
    own,
    others,
    rng: np.random.Generator,
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 128,
    hidden: Sequence[int] = (256, 256, 256),
    max_other_ratio: float = 10.0,
    loss_trace: list | None = None,
) -> DiscriminatorBc:
    """Train D to ascend E_own[log D] + E_others[log(1 - D)].

    Both expectations get equal weight regardless of class sizes, so the
    optimum is p_own / (p_own + p_others).
    """
    xo = own.states if isinstance(own, StateDataset) else np.atleast_2d(np.asarray(own, float))
    xn = others.states if isinstance(others, StateDataset) else np.atleast_2d(np.asarray(others, float))
    if xo.shape[0] == 0 or xn.shape[0] == 0:
        raise ValueError("both datasets must be nonempty")
    if xo.shape[1] != xn.shape[1]:
        raise ValueError("datasets have different state dimensions")
    cap = int(max_other_ratio * xo.shape[0])
    if xn.shape[0] > cap:
        xn = xn[np.sort(rng.choice(xn.shape[0], size=cap, replace=False))]

    x = np.vstack([xo, xn])
    y = np.concatenate([np.ones(xo.shape[0]), np.zeros(xn.shape[0])])
    w = np.where(y == 1, x.shape[0] / (2.0 * xo.shape[0]), x.shape[0] / (2.0 * xn.shape[0]))
    shift = x.mean(axis=0)
    scale = np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
    xs = (x - shift) / scale

    d = x.shape[1]
    sizes = [d, *hidden, 1]
    net = init_mlp(sizes, ["tanh"] * len(hidden) + ["identity"], rng)
    params = net.params()
    opt = AdamState.for_params(params, lr=lr)
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for a in range(0, n, batch_size):
            idx = order[a:a + batch_size]
            z = mlp_forward(net, xs[idx])[:, 0]
            zc = np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)
            p = sigmoid(zc)
            yb, wb = y[idx], w[idx]
            # d(-log-likelihood)/dz, zero where the clip is active
            g = wb * (p - yb) * (np.abs(z) < LOGIT_CLIP) / idx.size
            grads = mlp_backward(net, xs[idx], g[:, None])
            params, opt = adam_step(params, grads, opt)
            net = net.with_params(params)
            if loss_trace is not None:
                eps = 1e-12
                epoch_loss += float(np.sum(wb * -(yb * np.log(p + eps) + (1 - yb) * np.log(1 - p + eps))))
        if loss_trace is not None:
            loss_trace.append(epoch_loss / n)
    return DiscriminatorBc(net, shift, scale)


def discriminator_distance(
    datasets: Sequence[StateDataset],
    rng: np.random.Generator,
    ids=None,
    **train_kwargs,
) -> DistanceMatrix:
    """One discriminator per policy (own states vs all others), then symmetric sums.

    d(i, j) = mean over B_j of f_i + mean over B_i of f_j, where f = (1 - D) / D.
    The diagonal is reported as 0.
    """
    n = len(datasets)
    if n < 2:
        raise ValueError("need at least two datasets to compare")
    streams = rng.spawn(n)
    f = np.zeros((n, n))  # f[i, j] = mean_{B_j} f_i
    for i in range(n):
        others = pool_datasets([datasets[j] for j in range(n) if j != i])
        disc = train_discriminator(datasets[i], others, streams[i], **train_kwargs)
        for j in range(n):
            f[i, j] = float(np.mean(disc.inverse_ratio(datasets[j].states)))
    m = f + f.T
    np.fill_diagonal(m, 0.0)
    return DistanceMatrix(m, ids if ids is not None else default_ids(n))
