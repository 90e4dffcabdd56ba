"""Evolution strategies with optional novelty reward (ES / NSR-ES) on PointWorld."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..core_math import AdamState, adam_step, make_rng
from ..environments import PointWorld
from ..gmm import VARIANCE_FLOOR, em_fit, log_responsibilities
from ..policies import AnglePolicy
from . import LearningCurve

BC_KINDS = ("terminal", "gaussian", "supervector")
MODES = ("ES", "NSR-ES")


@dataclass
class EsConfig:
    mode: str = "ES"
    bc: str = "supervector"
    population: int = 3
    episodes_per_bc: int = 5
    pairs: int = 50
    sigma: float = 0.1
    step_size: float = 0.02
    generations: int = 400
    novelty_k: int = 10
    novelty_weight: float | None = None
    components: int = 4
    relevance: float = 16.0
    ubm_max_states: int = 4000
    ubm_refit_every: int = 10
    hidden: tuple = (16, 16)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.bc not in BC_KINDS:
            raise ValueError(f"bc must be one of {BC_KINDS}")
        if min(self.population, self.episodes_per_bc, self.pairs, self.ubm_refit_every) < 1:
            raise ValueError("population, episodes, pairs and ubm_refit_every must be >= 1")
        if self.sigma < 0 or self.generations < 0:
            raise ValueError("sigma and generations must be non-negative")
        self.hidden = tuple(self.hidden)

    @property
    def weight(self) -> float:
        """Weight of novelty in the combined score."""
        if self.novelty_weight is not None:
            return float(self.novelty_weight)
        return 0.5 if self.mode == "NSR-ES" else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def centered_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks scaled to [-0.5, 0.5]; ties broken by position."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 1:
        return np.zeros(1)
    ranks = np.empty(x.size)
    ranks[np.argsort(x, kind="stable")] = np.arange(x.size)
    return ranks / (x.size - 1) - 0.5


def _stack_nets(template: AnglePolicy, thetas: np.ndarray):
    layers = []
    i = 0
    for w, b in zip(template.net.weights, template.net.biases):
        W = thetas[:, i:i + w.size].reshape(-1, *w.shape)
        i += w.size
        B = thetas[:, i:i + b.size]
        i += b.size
        layers.append((W, B))
    return layers


def batch_rollout(env: PointWorld, template: AnglePolicy, thetas: np.ndarray):
    """Roll out one deterministic episode per parameter vector.

    Returns recorded states (B, T, 2) and returns (B,).
    """
    thetas = np.atleast_2d(thetas)
    layers = _stack_nets(template, thetas)
    acts = template.net.activations
    n = thetas.shape[0]
    pos = np.zeros((n, 2))
    states = np.empty((n, env.max_steps, 2))
    for t in range(env.max_steps):
        states[:, t] = pos
        h = pos
        for (W, B), act in zip(layers, acts):
            h = np.einsum("bi,bij->bj", h, W) + B
            if act == "tanh":
                h = np.tanh(h)
        phi = np.pi * (1.0 + np.tanh(h[:, 0]))
        pos = env.move(pos, phi)
    return states, pos[:, 1] - 0.0


class _Archive:
    """Behaviour archive; stores raw state data so state-based BCs can be refit."""

    def __init__(self, cfg: EsConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.states: list[np.ndarray] = []
        self.ubm = None

    def add(self, states: np.ndarray) -> None:
        self.states.append(states)

    def __len__(self) -> int:
        return len(self.states)

    def refit(self, population: list[np.ndarray]) -> None:
        """Refit the supervector UBM on archive plus current population states."""
        if self.cfg.bc == "supervector":
            self.ubm = fit_ubm(self.cfg, self.states + population, self.rng)

    def novelty(self, query: list[np.ndarray]) -> np.ndarray:
        """Mean distance from every query dataset to its k nearest archive entries."""
        dist = bc_distances(self.cfg, query, self.states, self.ubm)
        k = min(self.cfg.novelty_k, dist.shape[1])
        return np.mean(np.sort(dist, axis=1)[:, :k], axis=1)


def terminal_state_bc(policy, env, rng=None, episodes: int = 5) -> np.ndarray:
    """Final position averaged over ``episodes`` rollouts."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    finals = []
    for _ in range(episodes):
        state = env.reset(rng)
        done = False
        while not done:
            state, _, done = env.step(policy.sample(state, rng), rng)
        finals.append(state)
    return np.mean(finals, axis=0)


def fit_ubm(cfg: EsConfig, datasets: list[np.ndarray], rng: np.random.Generator):
    pooled = np.concatenate(datasets)
    if pooled.shape[0] > cfg.ubm_max_states:
        pooled = pooled[np.sort(rng.choice(pooled.shape[0], cfg.ubm_max_states, replace=False))]
    return em_fit(pooled, cfg.components, rng)


def _supervectors(cfg: EsConfig, ubm, datasets: list[np.ndarray]) -> np.ndarray:
    """MAP-adapted means scaled so half the squared distance is the KL bound."""
    # identical episodes: statistics of one episode scaled by the episode count
    data = np.stack(datasets)
    n_sets, t, d = data.shape
    log_resp, _ = log_responsibilities(ubm, data.reshape(-1, d))
    resp = np.exp(log_resp).reshape(n_sets, t, -1)
    nk = cfg.episodes_per_bc * resp.sum(axis=1)
    first = cfg.episodes_per_bc * np.einsum("ntk,ntd->nkd", resp, data)
    alpha = nk / (nk + cfg.relevance)
    with np.errstate(invalid="ignore", divide="ignore"):
        expected = np.where(nk[..., None] > 0, first / nk[..., None], ubm.means[None])
    adapted = alpha[..., None] * expected + (1.0 - alpha[..., None]) * ubm.means[None]
    z = adapted * np.sqrt(ubm.weights[:, None] / ubm.variances)[None]
    return z.reshape(n_sets, -1)


def bc_distances(cfg: EsConfig, query: list[np.ndarray], archive: list[np.ndarray],
                 ubm=None) -> np.ndarray:
    """Pairwise BC distances (len(query), len(archive)) from per-episode state arrays.

    The supervector BC needs ``ubm``, a mixture fit on the data being compared.
    """
    if cfg.bc == "terminal":
        a = np.array([s[-1] for s in query])
        b = np.array([s[-1] for s in archive])
        return np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2))
    if cfg.bc == "gaussian":
        # one diagonal Gaussian per episode set
        qa, qb = np.stack(query), np.stack(archive)
        ma, mb = qa.mean(axis=1)[:, None], qb.mean(axis=1)[None]
        va = np.maximum(qa.var(axis=1), VARIANCE_FLOOR)[:, None]
        vb = np.maximum(qb.var(axis=1), VARIANCE_FLOOR)[None]
        terms = va / vb + vb / va - 2.0 + (ma - mb) ** 2 * (1.0 / va + 1.0 / vb)
        return np.maximum(0.5 * terms.sum(axis=2), 0.0)
    if ubm is None:
        raise ValueError("supervector distances need a fitted UBM")
    z = _supervectors(cfg, ubm, query + archive)
    zq, za = z[:len(query)], z[len(query):]
    diff = zq[:, None, :] - za[None, :, :]
    return 0.5 * np.sum(diff * diff, axis=2)


def train_es(env: PointWorld, cfg: EsConfig, seed: int) -> tuple[LearningCurve, list[np.ndarray]]:
    """Run ES or NSR-ES. Returns the learning curve and final population parameters.

    The search keeps an elite: the best-returning population member seen so
    far (perturbed candidates are not eligible). With the supervector BC the
    archive UBM is refit every ``ubm_refit_every`` generations. The curve
    records, per generation, the elite return and the mean novelty of the
    evaluated perturbations (0 when novelty is unused). The returned list holds the population followed by
    the elite.
    """
    init_rng = make_rng(seed, 0)
    noise_rng = make_rng(seed, 1)
    select_rng = make_rng(seed, 2)
    bc_rng = make_rng(seed, 3)
    template = AnglePolicy.init(2, init_rng, cfg.hidden)
    thetas = [AnglePolicy.init(2, init_rng, cfg.hidden).flat() for _ in range(cfg.population)]
    opts = [AdamState.for_params([th], lr=cfg.step_size) for th in thetas]
    w_nov = cfg.weight
    use_novelty = w_nov > 0

    member_states, member_returns = batch_rollout(env, template, np.array(thetas))
    member_states = list(member_states)
    archive = _Archive(cfg, bc_rng)
    if use_novelty:
        for s in member_states:
            archive.add(s)

    best = int(np.argmax(member_returns))
    elite, elite_return = thetas[best].copy(), float(member_returns[best])
    curve = LearningCurve(seed=seed)
    n_params = thetas[0].size
    for gen in range(cfg.generations):
        if use_novelty and gen % cfg.ubm_refit_every == 0:
            archive.refit(member_states)
        if use_novelty and cfg.population > 1:
            nov = archive.novelty(member_states)
            p = nov / nov.sum() if nov.sum() > 0 else np.full(cfg.population, 1.0 / cfg.population)
            m = int(select_rng.choice(cfg.population, p=p))
        else:
            m = gen % cfg.population

        eps = noise_rng.standard_normal((cfg.pairs, n_params))
        if cfg.sigma > 0:
            eps_all = np.concatenate([eps, -eps])
            cand = thetas[m][None, :] + cfg.sigma * eps_all
            states, returns = batch_rollout(env, template, cand)
            if not np.all(np.isfinite(returns)):
                raise FloatingPointError("non-finite fitness")
            score = centered_ranks(returns)
            mean_nov = 0.0
            if use_novelty:
                nov = archive.novelty(list(states))
                mean_nov = float(nov.mean())
                score = (1.0 - w_nov) * score + w_nov * centered_ranks(nov)
            grad = eps_all.T @ score / (eps_all.shape[0] * cfg.sigma)
            new, opts[m] = adam_step([thetas[m]], [-grad], opts[m])
            thetas[m] = new[0]
        else:
            mean_nov = 0.0

        s_new, r_new = batch_rollout(env, template, thetas[m][None, :])
        member_states[m] = s_new[0]
        member_returns[m] = r_new[0]
        if use_novelty:
            archive.add(s_new[0])
        if r_new[0] > elite_return:
            elite, elite_return = thetas[m].copy(), float(r_new[0])
        curve.append(elite_return, mean_nov)
    return curve, thetas + [elite]
