"""Policy supervectors: a shared UBM, MAP-adapted means, and the KL upper bound."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gmm import DiagGmm, StateDataset, em_fit, log_responsibilities

DEFAULT_COMPONENTS = 64
DEFAULT_RELEVANCE = 16.0


@dataclass(frozen=True, eq=False)
class Supervector:
    means: np.ndarray
    ubm_id: str

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        if not np.all(np.isfinite(mu)):
            raise ValueError("supervector means must be finite")
        object.__setattr__(self, "means", mu)

    @property
    def vector(self) -> np.ndarray:
        return self.means.ravel()

    def to_json(self) -> str:
        return json.dumps({"type": "supervector", "ubm_id": self.ubm_id,
                           "means": self.means.tolist()}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Supervector":
        doc = json.loads(text)
        if doc.get("type") != "supervector":
            raise ValueError("not a supervector document")
        return cls(doc["means"], doc["ubm_id"])


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self):
        m = np.asarray(self.values, dtype=float)
        ids = tuple(str(i) for i in self.ids)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] != len(ids):
            raise ValueError(f"need an N x N matrix with N ids, got {m.shape} and {len(ids)} ids")
        if not np.all(np.isfinite(m)):
            raise ValueError("distance matrix contains non-finite values")
        if np.any(m < 0):
            raise ValueError("distances must be non-negative")
        if not np.allclose(m, m.T, rtol=0.0, atol=1e-9 * max(1.0, float(np.abs(m).max(initial=0.0)))):
            raise ValueError("distance matrix is not symmetric")
        if np.any(np.diag(m) != 0):
            raise ValueError("distance matrix diagonal must be zero")
        object.__setattr__(self, "values", m)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    def upper(self) -> np.ndarray:
        """Off-diagonal upper-triangle entries in row-major order."""
        return self.values[np.triu_indices(self.n, k=1)]


def default_ids(n: int) -> tuple[str, ...]:
    return tuple(f"policy{i}" for i in range(n))


def symmetric_matrix(values: np.ndarray, ids=None) -> DistanceMatrix:
    """Average with the transpose and zero the diagonal before validation."""
    m = np.asarray(values, dtype=float)
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 0.0)
    return DistanceMatrix(m, ids if ids is not None else default_ids(m.shape[0]))


def pool_datasets(datasets: Sequence[StateDataset]) -> StateDataset:
    if not datasets:
        raise ValueError("nothing to pool")
    d = datasets[0].d
    if any(ds.d != d for ds in datasets):
        raise ValueError("datasets have different state dimensions")
    if len(datasets) == 1:
        return datasets[0]
    rewards = None
    if all(ds.rewards is not None for ds in datasets):
        rewards = np.concatenate([ds.rewards for ds in datasets])
    return StateDataset(
        np.concatenate([ds.states for ds in datasets]),
        np.concatenate([ds.episode_lengths for ds in datasets]),
        np.concatenate([ds.returns for ds in datasets]),
        rewards,
    )


def adaptation_stats(ubm: DiagGmm, data) -> tuple[np.ndarray, np.ndarray]:
    """Soft counts n_k and first-order sums sum_t p(k|s_t) s_t."""
    x = data.states if isinstance(data, StateDataset) else np.atleast_2d(np.asarray(data, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("cannot adapt to an empty dataset")
    if x.shape[1] != ubm.d:
        raise ValueError(f"data dim {x.shape[1]} does not match UBM dim {ubm.d}")
    log_resp, _ = log_responsibilities(ubm, x)
    resp = np.exp(log_resp)
    return resp.sum(axis=0), resp.T @ x


def map_adapt(ubm: DiagGmm, data, relevance: float = DEFAULT_RELEVANCE) -> Supervector:
    """MAP-adapt the UBM means towards ``data``.

    Each component mean moves towards the responsibility-weighted data mean by
    ``n_k / (n_k + relevance)``; components that see no data keep the UBM mean.
    """
    r = float(relevance)
    if not r >= 0:
        raise ValueError("relevance factor must be non-negative")
    nk, first = adaptation_stats(ubm, data)
    adapted = ubm.means.copy()
    seen = nk > 0
    if np.isinf(r):
        return Supervector(adapted, ubm.ubm_id)
    expected = first[seen] / nk[seen, None]
    alpha = nk[seen] / (nk[seen] + r)
    adapted[seen] = alpha[:, None] * expected + (1.0 - alpha[:, None]) * ubm.means[seen]
    return Supervector(adapted, ubm.ubm_id)


def _check_same_ubm(ubm: DiagGmm, *svs: Supervector) -> None:
    uid = ubm.ubm_id
    for sv in svs:
        if sv.ubm_id != uid:
            raise ValueError("supervectors were adapted from a different UBM")
        if sv.means.shape != ubm.means.shape:
            raise ValueError("supervector shape does not match the UBM")


def kl_upper_bound(a: Supervector, b: Supervector, ubm: DiagGmm) -> float:
    _check_same_ubm(ubm, a, b)
    diff = a.means - b.means
    return float(0.5 * np.sum(ubm.weights[:, None] * diff * diff / ubm.variances))


def supervector_embedding(ubm: DiagGmm, svs: Sequence[Supervector]) -> np.ndarray:
    """Rows scaled so squared Euclidean distance / 2 equals the KL upper bound."""
    _check_same_ubm(ubm, *svs)
    scale = np.sqrt(ubm.weights[:, None] / ubm.variances).ravel()
    return np.array([sv.vector * scale for sv in svs])


def pairwise_kl_upper_bound(ubm: DiagGmm, svs: Sequence[Supervector]) -> np.ndarray:
    _check_same_ubm(ubm, *svs)
    mu = np.array([sv.means for sv in svs])
    scale = ubm.weights[:, None] / ubm.variances
    n = len(svs)
    m = np.zeros((n, n))
    for i in range(n):
        diff = mu[i + 1:] - mu[i]
        m[i, i + 1:] = 0.5 * np.sum(scale * diff * diff, axis=(1, 2))
        m[i + 1:, i] = m[i, i + 1:]
    return m


def subsample_states(data: StateDataset, max_states: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_states is None or data.n_states <= max_states:
        return data.states
    idx = np.sort(rng.choice(data.n_states, size=max_states, replace=False))
    return data.states[idx]


def supervector_distance_matrix(
    datasets: Sequence[StateDataset],
    k: int = DEFAULT_COMPONENTS,
    relevance: float = DEFAULT_RELEVANCE,
    rng: np.random.Generator | None = None,
    ids=None,
    max_ubm_states: int | None = None,
) -> tuple[DiagGmm, list[Supervector], DistanceMatrix]:
    """Fit a UBM on the pooled data, adapt one supervector per dataset, compare all pairs."""
    if len(datasets) < 2:
        raise ValueError("need at least two datasets to compare")
    if rng is None:
        raise ValueError("an explicit random generator is required")
    pooled = pool_datasets(datasets)
    ubm = em_fit(subsample_states(pooled, max_ubm_states, rng), k, rng)
    svs = [map_adapt(ubm, ds, relevance) for ds in datasets]
    m = pairwise_kl_upper_bound(ubm, svs)
    return ubm, svs, DistanceMatrix(m, ids if ids is not None else default_ids(len(datasets)))
