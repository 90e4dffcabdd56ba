"""Quality metrics for behavioural distance matrices."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .baselines import discriminator_distance, gaussian_distance_matrix, histogram_distance_matrix
from .core_math import make_rng
from .environments import DangerousPath, gather_data
from .gmm import StateDataset
from .policies import PathPolicy
from .supervector import DistanceMatrix, supervector_distance_matrix

METHODS = ("supervector", "gaussian", "histogram", "discriminator")


def _upper(m: DistanceMatrix | np.ndarray) -> np.ndarray:
    v = m.values if isinstance(m, DistanceMatrix) else np.asarray(m, float)
    return v[np.triu_indices(v.shape[0], k=1)]


def minmax_normalize(m: DistanceMatrix) -> DistanceMatrix:
    """Rescale all entries to [0, 1]. A constant matrix becomes all zeros."""
    v = m.values
    if v.shape[0] < 2:
        raise ValueError("need at least two policies")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        warnings.warn("constant distance matrix normalizes to zeros", RuntimeWarning, stacklevel=2)
        return DistanceMatrix(np.zeros_like(v), m.ids)
    return DistanceMatrix((v - lo) / (hi - lo), m.ids)


def return_correlation(distances: DistanceMatrix, returns) -> float:
    """Pearson r between pairwise distances and absolute mean-return differences."""
    r = np.asarray(returns, dtype=float).ravel()
    n = distances.values.shape[0]
    if r.size != n:
        raise ValueError(f"{r.size} returns for {n} policies")
    if n < 3:
        raise ValueError("correlation needs at least three policies")
    d = _upper(distances)
    gap = _upper(np.abs(r[:, None] - r[None, :]))
    if np.ptp(d) == 0 or np.ptp(gap) == 0:
        raise ValueError("correlation is undefined for a constant input")
    d = d - d.mean()
    gap = gap - gap.mean()
    c = float(np.dot(d, gap) / np.sqrt(np.dot(d, d) * np.dot(gap, gap)))
    return min(max(c, -1.0), 1.0)


def distance_error(predicted: DistanceMatrix, truth: DistanceMatrix) -> float:
    """Mean |d - d_true| / d_true over pairs whose true distance is nonzero."""
    if predicted.values.shape != truth.values.shape:
        raise ValueError("matrices have different shapes")
    p, t = _upper(predicted), _upper(truth)
    keep = t != 0
    if not keep.any():
        raise ValueError("ground truth has no nonzero pairs")
    return float(np.mean(np.abs(p[keep] - t[keep]) / t[keep]))


def coefficient_of_variation(matrices: Sequence[DistanceMatrix]) -> float:
    """Per-pair population sigma / mu across repetitions, averaged over pairs with mu != 0."""
    if len(matrices) < 2:
        raise ValueError("need at least two repetitions")
    shape = matrices[0].values.shape
    if any(m.values.shape != shape for m in matrices):
        raise ValueError("matrices have different shapes")
    stack = np.stack([_upper(m) for m in matrices])
    mu = stack.mean(axis=0)
    keep = mu != 0
    if not keep.any():
        raise ValueError("every pair has zero mean distance")
    return float(np.mean(stack[:, keep].std(axis=0) / mu[keep]))


@dataclass
class MetricReport:
    method: str
    correlation: float
    distance_error: float
    cv: float
    trajectories: int
    repetitions: int

    def __post_init__(self):
        vals = (self.correlation, self.distance_error, self.cv)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("metric report contains a non-finite value")
        if not -1.0 <= self.correlation <= 1.0 or self.distance_error < 0 or self.cv < 0:
            raise ValueError("metric out of range")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


# -- metric study --------------------------------------------------------------

def graded_path_policies(env_seed: int, n: int = 5, count: int = 20) -> list[PathPolicy]:
    """Epsilon-greedy walkers with epsilon = 0, 1/count, ..., (count-1)/count."""
    return [PathPolicy(env_seed, n, i / count) for i in range(count)]


def distance_matrix(method: str, datasets: Sequence[StateDataset], rng: np.random.Generator,
                    components: int = 64, relevance: float = 16.0, ids=None,
                    max_ubm_states: int | None = None) -> DistanceMatrix:
    if method == "supervector":
        return supervector_distance_matrix(datasets, components, relevance, rng, ids,
                                           max_ubm_states=max_ubm_states)[2]
    if method == "gaussian":
        return gaussian_distance_matrix(datasets, ids)
    if method == "histogram":
        return histogram_distance_matrix(datasets, ids)
    if method == "discriminator":
        return discriminator_distance(datasets, rng, ids)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


@dataclass
class StudyResult:
    reports: list[MetricReport]
    rows: list[dict]

    def report(self, method: str, trajectories: int) -> MetricReport:
        for r in self.reports:
            if r.method == method and r.trajectories == trajectories:
                return r
        raise KeyError((method, trajectories))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "trajectories", "repetition", "correlation", "distance_error"])
        for row in self.rows:
            w.writerow([row["method"], row["trajectories"], row["repetition"],
                        f"{row['correlation']:.9g}", f"{row['distance_error']:.9g}"])
        return buf.getvalue()


def metric_study(
    methods: Sequence[str] = ("supervector",),
    budgets: Sequence[int] = (10, 25, 50),
    repetitions: int = 3,
    seed: int = 0,
    n_policies: int = 20,
    env_n: int = 5,
    components: int = 4,
    relevance: float = 16.0,
    truth_repetition: int = 0,
    max_ubm_states: int | None = None,
) -> StudyResult:
    """Score BC methods on graded dangerous-path walkers.

    Every repetition gathers ``max(budgets)`` episodes per policy; smaller
    budgets use the leading episodes. The ground truth for the distance error
    is repetition ``truth_repetition`` at the largest budget. The walkers
    only ever occupy the cells of one path, so a handful of mixture
    components is enough; with many components every cell gets its own and
    the adapted means stop moving.
    """
    budgets = sorted(int(b) for b in budgets)
    if repetitions < 2:
        raise ValueError("need at least two repetitions for the CV")
    if not 0 <= truth_repetition < repetitions:
        raise ValueError("truth repetition out of range")
    env = DangerousPath(n=env_n, seed=seed)
    policies = graded_path_policies(seed, env_n, n_policies)
    ids = [f"eps{p.epsilon:.2f}" for p in policies]
    full = []
    for rep in range(repetitions):
        full.append([gather_data(env, pol, budgets[-1], make_rng(seed, 1, rep, i))
                     for i, pol in enumerate(policies)])

    reports, rows = [], []
    for method in methods:
        norm: dict[tuple[int, int], DistanceMatrix] = {}
        corr: dict[tuple[int, int], float] = {}
        for b in budgets:
            for rep in range(repetitions):
                data = [ds.select_episodes(range(b)) for ds in full[rep]]
                m = distance_matrix(method, data, make_rng(seed, 2, rep, b), components,
                                    relevance, ids, max_ubm_states)
                norm[b, rep] = minmax_normalize(m)
                corr[b, rep] = return_correlation(m, [ds.returns.mean() for ds in data])
        truth = norm[budgets[-1], truth_repetition]
        for b in budgets:
            errs = []
            for rep in range(repetitions):
                err = 0.0 if (b, rep) == (budgets[-1], truth_repetition) else \
                    distance_error(norm[b, rep], truth)
                errs.append(err)
                rows.append({"method": method, "trajectories": b, "repetition": rep,
                             "correlation": corr[b, rep], "distance_error": err})
            others = [e for rep, e in enumerate(errs)
                      if (b, rep) != (budgets[-1], truth_repetition)]
            reports.append(MetricReport(
                method=method,
                correlation=float(np.mean([corr[b, r] for r in range(repetitions)])),
                distance_error=float(np.mean(others)),
                cv=coefficient_of_variation([norm[b, r] for r in range(repetitions)]),
                trajectories=b,
                repetitions=repetitions,
            ))
    return StudyResult(reports, rows)
