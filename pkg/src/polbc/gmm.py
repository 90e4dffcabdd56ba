"""Diagonal-covariance Gaussian mixtures and the state datasets they are fit on."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .core_math import log_sum_exp_rows

VARIANCE_FLOOR = 1e-6
EM_TOL = 1e-6
EM_MAX_ITERS = 200
KMEANS_MAX_ITERS = 50
EMPTY_COMPONENT_COUNT = 1e-8

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class StateDataset:
    """States visited by one policy, stored episode after episode.

    ``rewards`` holds the reward that followed each recorded state; it may be
    omitted for data that carries only per-episode returns.
    """

    states: np.ndarray
    episode_lengths: np.ndarray
    returns: np.ndarray
    rewards: np.ndarray | None = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        lengths = np.asarray(self.episode_lengths, dtype=np.int64).ravel()
        returns = np.asarray(self.returns, dtype=float).ravel()
        if states.ndim != 2:
            raise ValueError("states must be a 2-D array")
        if np.any(lengths <= 0) or int(lengths.sum()) != states.shape[0]:
            raise ValueError("episode lengths must be positive and sum to the state count")
        if lengths.size != returns.size:
            raise ValueError("need exactly one return per episode")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(returns))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "episode_lengths", lengths)
        object.__setattr__(self, "returns", returns)
        if self.rewards is not None:
            rewards = np.asarray(self.rewards, dtype=float).ravel()
            if rewards.size != states.shape[0]:
                raise ValueError("need one reward per recorded state")
            object.__setattr__(self, "rewards", rewards)

    @classmethod
    def from_states(cls, states) -> "StateDataset":
        """Wrap a bare state array as a single episode with zero return."""
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.shape[0] == 0:
            return cls(np.zeros((0, states.shape[1])), np.zeros(0, dtype=np.int64), np.zeros(0))
        return cls(states, [states.shape[0]], [0.0])

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    @property
    def n_episodes(self) -> int:
        return self.episode_lengths.size

    def __len__(self) -> int:
        return self.n_states

    def episodes(self) -> list[np.ndarray]:
        bounds = np.concatenate([[0], np.cumsum(self.episode_lengths)])
        return [self.states[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def select_episodes(self, idx) -> "StateDataset":
        bounds = np.concatenate([[0], np.cumsum(self.episode_lengths)])
        idx = np.asarray(idx, dtype=np.int64)
        rows = np.concatenate([np.arange(bounds[i], bounds[i + 1]) for i in idx])
        return StateDataset(
            self.states[rows], self.episode_lengths[idx], self.returns[idx],
            None if self.rewards is None else self.rewards[rows],
        )


def _as_states(data) -> np.ndarray:
    if isinstance(data, StateDataset):
        return data.states
    x = np.asarray(data, dtype=float)
    return x[:, None] if x.ndim == 1 else x


@dataclass(frozen=True, eq=False)
class DiagGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if mu.shape != var.shape or mu.shape[0] != w.size:
            raise ValueError(f"inconsistent shapes: w {w.shape}, mu {mu.shape}, var {var.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("mixture parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            "type": "diag_gmm",
            "k": self.k,
            "d": self.d,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @property
    def ubm_id(self) -> str:
        """Content hash over the exact parameter values."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        doc = self.to_dict()
        doc["ubm_id"] = self.ubm_id
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DiagGmm":
        doc = json.loads(text)
        if doc.get("type") != "diag_gmm":
            raise ValueError("not a diag_gmm document")
        gmm = cls(doc["weights"], doc["means"], doc["variances"])
        if gmm.k != doc["k"] or gmm.d != doc["d"]:
            raise ValueError("k/d fields disagree with parameter shapes")
        if "ubm_id" in doc and doc["ubm_id"] != gmm.ubm_id:
            raise ValueError("ubm_id does not match the stored parameters")
        return gmm


def component_log_densities(gmm: DiagGmm, x: np.ndarray) -> np.ndarray:
    """``log w_k + log N(x_t | mu_k, diag var_k)`` as an (n, K) array."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != gmm.d:
        raise ValueError(f"states of shape {x.shape} do not match mixture dim {gmm.d}")
    prec = 1.0 / gmm.variances
    # accumulate one dimension at a time; memory stays at (n, K)
    quad = np.zeros((x.shape[0], gmm.k))
    for j in range(gmm.d):
        diff = x[:, j:j + 1] - gmm.means[:, j]
        quad += diff * diff * prec[:, j]
    log_norm = -0.5 * (gmm.d * _LOG_2PI + np.sum(np.log(gmm.variances), axis=1))
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    return log_w + log_norm - 0.5 * quad


def log_responsibilities(gmm: DiagGmm, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-state log posteriors over components and per-state log density."""
    lj = component_log_densities(gmm, x)
    ll = log_sum_exp_rows(lj)
    return lj - ll[:, None], ll


def responsibilities(gmm: DiagGmm, state) -> np.ndarray:
    """Posterior probability of each component given one state (or a batch)."""
    s = np.asarray(state, dtype=float)
    single = s.ndim == 1
    if single:
        if s.size != gmm.d:
            raise ValueError(f"state has length {s.size}, mixture dim is {gmm.d}")
        s = s[None, :]
    lr, _ = log_responsibilities(gmm, s)
    p = np.exp(lr)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single else p


def mean_log_likelihood(gmm: DiagGmm, data) -> float:
    x = _as_states(data)
    if x.shape[0] == 0:
        raise ValueError("mean log-likelihood of an empty dataset")
    _, ll = log_responsibilities(gmm, x)
    return float(np.mean(ll))


def kmeans_init(data, k: int, rng: np.random.Generator, max_iters: int = KMEANS_MAX_ITERS) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations; returns (k, d) centers."""
    x = _as_states(data)
    if k < 1:
        raise ValueError("k must be at least 1")
    n_unique = np.unique(x, axis=0).shape[0] if x.shape[0] else 0
    if n_unique < k:
        raise ValueError(f"cannot place {k} centers on {n_unique} distinct points")
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("k-means++ ran out of distinct points")
        idx = rng.choice(n, p=d2 / total)
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))

    labels = None
    for _ in range(max_iters):
        dist = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
        new_labels = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    return centers


@dataclass
class EmTrace:
    """Mean log-likelihood before every M-step, for convergence diagnostics."""

    log_likelihoods: list[float]
    converged: bool


def _m_step(x, resp, floor):
    nk = resp.sum(axis=0)
    safe = np.maximum(nk, 1e-300)
    means = (resp.T @ x) / safe[:, None]
    second = (resp.T @ (x * x)) / safe[:, None]
    var = np.maximum(second - means ** 2, floor)
    return nk, means, var


def em_fit(data, k: int, rng: np.random.Generator, tol: float = EM_TOL,
           max_iters: int = EM_MAX_ITERS, floor: float = VARIANCE_FLOOR,
           trace: EmTrace | None = None) -> DiagGmm:
    """Fit a diagonal GMM by EM, initialized from k-means.

    Stops when the relative improvement of the mean log-likelihood drops
    below ``tol`` or after ``max_iters`` EM iterations. Variances are floored
    at ``floor``; components that lose all their mass are re-seeded at the
    worst-explained state.
    """
    x = _as_states(data)
    n, d = x.shape
    if n < k:
        raise ValueError(f"need at least {k} states, got {n}")
    n_unique = np.unique(x, axis=0).shape[0]
    if n_unique < k:
        # degenerate data: place surplus components on existing points, the floor keeps them valid
        centers = np.vstack([kmeans_init(x, n_unique, rng), np.repeat(x[:1], k - n_unique, axis=0)])
    else:
        centers = kmeans_init(x, k, rng)

    dist = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    resp = np.zeros((n, k))
    resp[np.arange(n), np.argmin(dist, axis=1)] = 1.0
    nk, means, var = _m_step(x, resp, floor)
    empty = nk <= 0
    means[empty] = centers[empty]
    var[empty] = np.maximum(x.var(axis=0), floor)
    weights = np.maximum(nk, 0.0) / n
    if np.any(empty):
        weights = (weights + 1e-12) / (weights + 1e-12).sum()
    gmm = DiagGmm(weights / weights.sum(), means, var)

    history: list[float] = []
    converged = False
    for _ in range(max_iters):
        log_resp, ll = log_responsibilities(gmm, x)
        mean_ll = float(np.mean(ll))
        if history:
            prev = history[-1]
            if abs(mean_ll - prev) <= tol * max(abs(prev), 1e-12):
                history.append(mean_ll)
                converged = True
                break
        history.append(mean_ll)
        resp = np.exp(log_resp)
        nk, means, var = _m_step(x, resp, floor)
        starving = np.flatnonzero(nk < EMPTY_COMPONENT_COUNT)
        if starving.size:
            order = np.argsort(ll, kind="stable")
            for j, comp in enumerate(starving):
                means[comp] = x[order[j % n]]
                var[comp] = np.maximum(x.var(axis=0), floor)
        weights = np.maximum(nk, 1e-300)
        gmm = DiagGmm(weights / weights.sum(), means, var)
    if trace is not None:
        trace.log_likelihoods[:] = history
        trace.converged = converged
    return gmm
