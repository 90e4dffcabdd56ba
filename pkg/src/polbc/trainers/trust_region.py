"""Clip-free policy-gradient training with a behavioural stop constraint.

Each iteration collects a batch with the current ("old") policy and then
takes minibatch steps on the unclipped ratio-weighted objective. After every
step the new policy is compared with the old one; once the chosen divergence
exceeds its threshold the remaining minibatches are skipped.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..baselines import fit_gaussian_bc, gaussian_symmetric_kl
from ..core_math import AdamState, adam_step, init_mlp, make_rng, mlp_backward, mlp_forward
from ..environments import CORRECT, MINE, DangerousPath
from ..gmm import em_fit
from ..policies import SoftmaxPolicy
from ..supervector import kl_upper_bound, map_adapt
from . import LearningCurve

CONSTRAINTS = ("none", "max_tv", "gaussian", "supervector")

DEFAULT_THRESHOLDS = {"max_tv": 0.4, "gaussian": 10.0, "supervector": 0.05}

THRESHOLD_GRIDS = {
    "max_tv": (0.001, 0.005, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5),
    "gaussian": (0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 15.0, 20.0),
    "supervector": (0.01, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5),
}


@dataclass
class TrustRegionConfig:
    constraint: str = "none"
    threshold: float | None = None
    iterations: int = 80
    n_envs: int = 8
    steps_per_env: int = 512
    minibatches: int = 100
    minibatch_size: int = 64
    lr: float = 1e-3
    hidden: tuple = (16, 16)
    probe_episodes: int = 5
    probe_noise: float = 1e-3
    probe_greedy: bool = True
    components: int = 4
    relevance: float = 16.0
    normalize_advantage: bool = True
    head_scale: float = 0.01
    max_grad_norm: float | None = 0.5
    env_n: int = 5
    env_max_steps: int = 25

    def __post_init__(self):
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"constraint must be one of {CONSTRAINTS}")
        if self.threshold is None and self.constraint != "none":
            self.threshold = DEFAULT_THRESHOLDS[self.constraint]
        if self.constraint != "none" and not self.threshold > 0:
            raise ValueError("threshold must be positive")
        counts = (self.iterations, self.n_envs, self.steps_per_env, self.minibatches,
                  self.minibatch_size, self.probe_episodes, self.components)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# -- divergences ---------------------------------------------------------------

def max_tv_divergence(old: SoftmaxPolicy, new: SoftmaxPolicy, states) -> float:
    """Largest total-variation distance between action distributions over ``states``."""
    x = np.atleast_2d(np.asarray(states, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("need at least one state")
    tv = 0.5 * np.abs(old.probs(x) - new.probs(x)).sum(axis=1)
    return float(min(max(tv.max(), 0.0), 1.0))


def behavioural_constraint(kind: str, old_states: np.ndarray, new_policy: SoftmaxPolicy,
                           env: DangerousPath, threshold: float, rng: np.random.Generator,
                           cfg: TrustRegionConfig | None = None,
                           noise_rng: np.random.Generator | None = None) -> tuple[bool, float]:
    """Compare cached old-policy probe states with fresh probes of ``new_policy``.

    ``old_states`` must already carry the probe noise. Pass ``noise_rng`` in
    the same state that jittered ``old_states`` to reuse the same noise draw.
    Returns (violated, value).
    """
    cfg = cfg or TrustRegionConfig()
    new_states = probe_states(env, new_policy, cfg.probe_episodes, cfg.probe_noise, rng,
                              cfg.probe_greedy, noise_rng)
    if kind == "gaussian":
        value = gaussian_symmetric_kl(fit_gaussian_bc(old_states), fit_gaussian_bc(new_states))
    elif kind == "supervector":
        ubm = em_fit(np.vstack([old_states, new_states]), cfg.components, rng)
        a = map_adapt(ubm, old_states, cfg.relevance)
        b = map_adapt(ubm, new_states, cfg.relevance)
        value = kl_upper_bound(a, b, ubm)
    else:
        raise ValueError(f"{kind!r} is not a state-based constraint")
    return bool(value > threshold), float(value)


# -- rollouts ------------------------------------------------------------------

class _PathBatch:
    """Several copies of one dangerous-path layout stepped in lockstep."""

    def __init__(self, env: DangerousPath, count: int):
        self.env = env
        self.count = count
        self.pos = np.zeros((count, env.n), dtype=np.int64)
        self.t = np.zeros(count, dtype=np.int64)
        self.visited = [set() for _ in range(count)]
        for i in range(count):
            self._reset(i)

    def _reset(self, i: int) -> None:
        self.pos[i] = 0
        self.t[i] = 0
        self.visited[i] = {tuple(self.pos[i])}

    def step(self, actions: np.ndarray):
        """Advance every copy; finished episodes restart. Returns (rewards, done)."""
        rewards = np.zeros(self.count)
        done = np.zeros(self.count, dtype=bool)
        for i, a in enumerate(actions):
            outcome = self.env.labels(self.pos[i])[a]
            if outcome == CORRECT:
                self.pos[i, a] += 1
                key = tuple(self.pos[i])
                if key not in self.visited[i]:
                    self.visited[i].add(key)
                    rewards[i] = 1.0
            elif outcome == MINE:
                self.pos[i] = 0
            self.t[i] += 1
            if self.t[i] >= self.env.max_steps:
                done[i] = True
                self._reset(i)
        return rewards, done


def collect_batch(env: DangerousPath, policy: SoftmaxPolicy, n_envs: int, steps: int,
                  rng: np.random.Generator, greedy: bool = False):
    """Run ``n_envs`` copies for ``steps`` steps each.

    With ``greedy`` every copy takes the most probable action instead of sampling.
    Returns states (n_envs*steps, n), actions, rewards and the returns of the
    episodes that finished inside the window.
    """
    batch = _PathBatch(env, n_envs)
    states = np.empty((steps, n_envs, env.n))
    actions = np.empty((steps, n_envs), dtype=np.int64)
    rewards = np.empty((steps, n_envs))
    running = np.zeros(n_envs)
    finished: list[float] = []
    for t in range(steps):
        states[t] = batch.pos
        if greedy:
            actions[t] = np.argmax(policy.probs(states[t]), axis=1)
        else:
            actions[t] = policy.sample_batch(states[t], rng)
        rewards[t], done = batch.step(actions[t])
        running += rewards[t]
        finished.extend(running[done].tolist())
        running[done] = 0.0
    flat = (steps * n_envs, env.n)
    return states.reshape(flat), actions.ravel(), rewards.ravel(), np.array(finished)


def probe_states(env: DangerousPath, policy: SoftmaxPolicy, episodes: int, noise: float,
                 rng: np.random.Generator, greedy: bool = True,
                 noise_rng: np.random.Generator | None = None) -> np.ndarray:
    """States of ``episodes`` full episodes with N(0, noise^2) jitter added.

    Greedy probes make the measured change reflect the policy's preferred
    behaviour rather than sampling luck; the jitter keeps the points distinct.
    The jitter comes from ``noise_rng`` when given, else from ``rng``.
    """
    states, _, _, _ = collect_batch(env, policy, episodes, env.max_steps, rng, greedy)
    jitter = (noise_rng if noise_rng is not None else rng).standard_normal(states.shape)
    return states + noise * jitter


# -- training ------------------------------------------------------------------

def _policy_grad(policy: SoftmaxPolicy, x, actions, old_logp, adv):
    """Gradient of -mean(ratio * adv) w.r.t. the policy parameters, plus the loss."""
    z = mlp_forward(policy.net, x)
    z = z - z.max(axis=1, keepdims=True)
    logp_all = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp_all)
    idx = np.arange(x.shape[0])
    ratio = np.exp(logp_all[idx, actions] - old_logp)
    loss = -float(np.mean(ratio * adv))
    onehot = np.zeros_like(probs)
    onehot[idx, actions] = 1.0
    g = -(ratio * adv)[:, None] * (onehot - probs) / x.shape[0]
    return mlp_backward(policy.net, x, g), loss


def _value_grad(value_net, x, targets):
    pred = mlp_forward(value_net, x)[:, 0]
    err = pred - targets
    return mlp_backward(value_net, x, (2.0 * err / x.shape[0])[:, None]), float(np.mean(err ** 2))


def _clip_norm(grads, max_norm: float):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


def train_trust_region(env: DangerousPath, cfg: TrustRegionConfig, seed: int,
                       update_log: list | None = None) -> LearningCurve:
    """Train a softmax policy; returns per-iteration mean episode return and stop flags.

    The stop flag is 1 when the constraint cut the iteration's updates short.
    If ``update_log`` is given, the number of parameter updates made in each
    iteration is appended to it.
    """
    init_rng = make_rng(seed, 0)
    roll_rng = make_rng(seed, 1)
    batch_rng = make_rng(seed, 2)
    probe_rng = make_rng(seed, 3)
    obs = env.n
    policy = SoftmaxPolicy.init(obs, env.n_actions, init_rng, cfg.hidden)
    if cfg.head_scale != 1.0:
        # a small output layer starts the policy close to uniform
        params = policy.net.params()
        params[-2] = params[-2] * cfg.head_scale
        params[-1] = params[-1] * cfg.head_scale
        policy = SoftmaxPolicy(policy.net.with_params(params))
    value_net = init_mlp([obs, *cfg.hidden, 1], ["tanh"] * len(cfg.hidden) + ["identity"], init_rng)
    p_opt = AdamState.for_params(policy.net.params(), lr=cfg.lr)
    v_opt = AdamState.for_params(value_net.params(), lr=cfg.lr)

    curve = LearningCurve(seed=seed)
    for it in range(cfg.iterations):
        states, actions, rewards, finished = collect_batch(
            env, policy, cfg.n_envs, cfg.steps_per_env, roll_rng)
        old = policy
        old_logp = old.log_probs(states)[np.arange(states.shape[0]), actions]
        # discount 0: the return target is the immediate reward
        advantages = rewards - mlp_forward(value_net, states)[:, 0]
        old_probs = old.probs(states) if cfg.constraint == "max_tv" else None
        old_probe = None
        if cfg.constraint in ("gaussian", "supervector"):
            # old and new probes share one noise draw (common random numbers),
            # so unchanged behaviour measures as zero change
            old_probe = probe_states(env, old, cfg.probe_episodes, cfg.probe_noise, probe_rng,
                                     cfg.probe_greedy, make_rng(seed, 4, it))

        n = states.shape[0]
        order = batch_rng.permutation(n)
        cursor = 0
        stopped = False
        updates = 0
        for _ in range(cfg.minibatches):
            if cursor + cfg.minibatch_size > n:
                order = batch_rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + cfg.minibatch_size]
            cursor += cfg.minibatch_size
            adv = advantages[idx]
            if cfg.normalize_advantage and adv.size > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            p_grads, p_loss = _policy_grad(policy, states[idx], actions[idx], old_logp[idx], adv)
            v_grads, v_loss = _value_grad(value_net, states[idx], rewards[idx])
            if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                raise FloatingPointError(
                    f"non-finite loss (policy {p_loss}, value {v_loss}) at seed {seed}")
            if cfg.max_grad_norm is not None:
                p_grads = _clip_norm(p_grads, cfg.max_grad_norm)
                v_grads = _clip_norm(v_grads, cfg.max_grad_norm)
            params, p_opt = adam_step(policy.net.params(), p_grads, p_opt)
            policy = SoftmaxPolicy(policy.net.with_params(params))
            vparams, v_opt = adam_step(value_net.params(), v_grads, v_opt)
            value_net = value_net.with_params(vparams)
            updates += 1

            if cfg.constraint == "max_tv":
                tv = 0.5 * np.abs(old_probs - policy.probs(states)).sum(axis=1).max()
                stopped = tv > cfg.threshold
            elif old_probe is not None:
                stopped, _ = behavioural_constraint(cfg.constraint, old_probe, policy, env,
                                                    cfg.threshold, probe_rng, cfg,
                                                    make_rng(seed, 4, it))
            if stopped:
                break
        if update_log is not None:
            update_log.append(updates)
        mean_return = float(finished.mean()) if finished.size else 0.0
        curve.append(mean_return, 1.0 if stopped else 0.0)
    return curve
