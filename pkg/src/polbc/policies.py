"""Policies acted on by the environments and trainers."""
from __future__ import annotations

import json

import numpy as np

from .core_math import Mlp, init_mlp, mlp_forward, softmax_rows, zero_mlp
from .environments import CORRECT, GRID_ACTIONS, GridLayout, dangerous_path_labels

HIDDEN = (16, 16)


def _sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    # inverse CDF with a single uniform draw per sample
    idx = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
    return min(idx, probs.size - 1)


class TabularPolicy:
    """Per-cell categorical distribution over U, D, L, R."""

    def __init__(self, probs, walls):
        probs = np.asarray(probs, dtype=float)
        walls = np.asarray(walls, dtype=bool)
        if probs.ndim != 3 or probs.shape[2] != 4 or probs.shape[:2] != walls.shape:
            raise ValueError(f"bad tabular policy shape {probs.shape}")
        free = ~walls
        if np.any(probs < 0) or not np.allclose(probs[free].sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("every non-wall cell needs a probability vector")
        probs = probs.copy()
        probs[walls] = 0.0
        self.probs = probs
        self.walls = walls

    @classmethod
    def parse(cls, text: str, layout: GridLayout | None = None) -> "TabularPolicy":
        """Grid text: one token per cell.

        ``U``/``D``/``L``/``R`` pick a direction, ``#`` marks a wall, and a
        comma list such as ``0.5,0.5,0,0`` gives explicit U,D,L,R probabilities.
        """
        rows = [line.split() for line in text.strip().splitlines() if line.strip()]
        if len({len(r) for r in rows}) != 1:
            raise ValueError("policy rows have different lengths")
        h, w = len(rows), len(rows[0])
        probs = np.zeros((h, w, 4))
        walls = np.zeros((h, w), dtype=bool)
        for i, row in enumerate(rows):
            for j, tok in enumerate(row):
                if tok == "#":
                    walls[i, j] = True
                elif tok in GRID_ACTIONS:
                    probs[i, j, GRID_ACTIONS.index(tok)] = 1.0
                else:
                    vals = [float(v) for v in tok.split(",")]
                    if len(vals) != 4:
                        raise ValueError(f"bad probability token {tok!r}")
                    probs[i, j] = vals
        if layout is not None:
            if layout.shape != (h, w):
                raise ValueError("policy grid does not match the layout")
            walls = walls | layout.walls
        return cls(probs, walls)

    def to_text(self) -> str:
        lines = []
        for i in range(self.probs.shape[0]):
            toks = []
            for j in range(self.probs.shape[1]):
                p = self.probs[i, j]
                if self.walls[i, j]:
                    toks.append("#")
                elif np.count_nonzero(p) == 1 and p.max() == 1.0:
                    toks.append(GRID_ACTIONS[int(np.argmax(p))])
                else:
                    toks.append(",".join(repr(float(v)) for v in p))
            lines.append(" ".join(toks))
        return "\n".join(lines) + "\n"

    def action_probs(self, state) -> np.ndarray:
        r, c = int(round(state[0])), int(round(state[1]))
        if self.walls[r, c]:
            raise ValueError(f"cell {(r, c)} is a wall")
        return self.probs[r, c]

    def sample(self, state, rng: np.random.Generator) -> int:
        p = self.action_probs(state)
        if np.count_nonzero(p) == 1:
            return int(np.argmax(p))
        return _sample_index(p, rng)

    def flat(self) -> np.ndarray:
        return self.probs.ravel().copy()

    def with_flat(self, vec) -> "TabularPolicy":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.probs.size:
            raise ValueError(f"expected {self.probs.size} values, got {vec.size}")
        return TabularPolicy(vec.reshape(self.probs.shape), self.walls)


class SoftmaxPolicy:
    """Categorical policy over ``n_actions`` from a tanh MLP."""

    def __init__(self, net: Mlp):
        self.net = net
        self.n_actions = net.output_dim

    @classmethod
    def init(cls, obs_dim: int, n_actions: int, rng: np.random.Generator,
             hidden=HIDDEN) -> "SoftmaxPolicy":
        sizes = [obs_dim, *hidden, n_actions]
        return cls(init_mlp(sizes, ["tanh"] * len(hidden) + ["identity"], rng))

    @classmethod
    def zeros(cls, obs_dim: int, n_actions: int, hidden=HIDDEN) -> "SoftmaxPolicy":
        return cls(zero_mlp([obs_dim, *hidden, n_actions], ["tanh"] * len(hidden) + ["identity"]))

    def probs(self, states) -> np.ndarray:
        out = mlp_forward(self.net, states)
        return softmax_rows(out)

    def log_probs(self, states) -> np.ndarray:
        z = mlp_forward(self.net, states)
        z = z - np.max(z, axis=-1, keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

    def action_log_prob(self, state, action: int) -> float:
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise ValueError(f"invalid action {action}")
        return float(self.log_probs(np.asarray(state, float))[action])

    def sample(self, state, rng: np.random.Generator) -> int:
        return _sample_index(self.probs(np.asarray(state, float)), rng)

    def sample_batch(self, states, rng: np.random.Generator) -> np.ndarray:
        p = self.probs(states)
        u = rng.random(p.shape[0])[:, None] * p.sum(axis=1, keepdims=True)
        return np.minimum((u >= np.cumsum(p, axis=1)).sum(axis=1), self.n_actions - 1)

    def flat(self) -> np.ndarray:
        return self.net.flat()

    def with_flat(self, vec) -> "SoftmaxPolicy":
        return SoftmaxPolicy(self.net.from_flat(vec))


class AnglePolicy:
    """Deterministic heading policy: phi = pi * (1 + tanh(o)) lies in [0, 2 pi]."""

    def __init__(self, net: Mlp):
        if net.output_dim != 1:
            raise ValueError("angle policy needs a scalar output")
        self.net = net

    @classmethod
    def init(cls, obs_dim: int, rng: np.random.Generator, hidden=HIDDEN) -> "AnglePolicy":
        sizes = [obs_dim, *hidden, 1]
        return cls(init_mlp(sizes, ["tanh"] * len(hidden) + ["identity"], rng))

    @classmethod
    def zeros(cls, obs_dim: int = 2, hidden=HIDDEN) -> "AnglePolicy":
        return cls(zero_mlp([obs_dim, *hidden, 1], ["tanh"] * len(hidden) + ["identity"]))

    def angles(self, states) -> np.ndarray:
        o = mlp_forward(self.net, np.atleast_2d(np.asarray(states, float)))[:, 0]
        return np.pi * (1.0 + np.tanh(o))

    def sample(self, state, rng=None) -> float:
        return float(self.angles(state)[0])

    def flat(self) -> np.ndarray:
        return self.net.flat()

    def with_flat(self, vec) -> "AnglePolicy":
        return AnglePolicy(self.net.from_flat(vec))


class PathPolicy:
    """Epsilon-greedy walker on a dangerous-path layout.

    Takes the correct action with probability ``1 - epsilon`` and a uniformly
    random one otherwise. It reads the labeling of the environment with the
    same ``seed``.
    """

    def __init__(self, env_seed: int, n: int = 5, epsilon: float = 0.0):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must be a probability")
        self.env_seed = int(env_seed)
        self.n = int(n)
        self.epsilon = float(epsilon)
        self._correct: dict[tuple, int] = {}

    def correct_action(self, state) -> int:
        key = tuple(int(round(x)) for x in state)
        a = self._correct.get(key)
        if a is None:
            labels = dangerous_path_labels(self.env_seed, key, self.n)
            a = self._correct[key] = int(np.flatnonzero(labels == CORRECT)[0])
        return a

    def action_probs(self, state) -> np.ndarray:
        p = np.full(self.n, self.epsilon / self.n)
        p[self.correct_action(state)] += 1.0 - self.epsilon
        return p

    def sample(self, state, rng: np.random.Generator) -> int:
        if rng.random() < self.epsilon:
            return int(rng.integers(self.n))
        return self.correct_action(state)

    def flat(self) -> np.ndarray:
        return np.array([self.epsilon])

    def with_flat(self, vec) -> "PathPolicy":
        return PathPolicy(self.env_seed, self.n, float(np.asarray(vec).ravel()[0]))


def policy_flat_params(policy) -> np.ndarray:
    return policy.flat()


def policy_from_flat(template, vec):
    return template.with_flat(vec)


def policy_to_json(policy) -> str:
    if isinstance(policy, TabularPolicy):
        doc = {"type": "tabular", "shape": list(policy.probs.shape),
               "walls": policy.walls.astype(int).tolist(), "params": policy.flat().tolist()}
    elif isinstance(policy, (SoftmaxPolicy, AnglePolicy)):
        doc = {"type": "softmax" if isinstance(policy, SoftmaxPolicy) else "angle",
               "sizes": policy.net.sizes, "activations": policy.net.activations,
               "params": policy.flat().tolist()}
    elif isinstance(policy, PathPolicy):
        doc = {"type": "path", "env_seed": policy.env_seed, "n": policy.n,
               "params": [policy.epsilon]}
    else:
        raise TypeError(f"cannot serialize {type(policy).__name__}")
    return json.dumps(doc)


def policy_from_json(text: str):
    doc = json.loads(text)
    kind = doc.get("type")
    if kind == "tabular":
        walls = np.asarray(doc["walls"], dtype=bool)
        return TabularPolicy(np.asarray(doc["params"], float).reshape(doc["shape"]), walls)
    if kind in ("softmax", "angle"):
        net = zero_mlp(doc["sizes"], doc["activations"]).from_flat(doc["params"])
        return SoftmaxPolicy(net) if kind == "softmax" else AnglePolicy(net)
    if kind == "path":
        return PathPolicy(doc["env_seed"], doc["n"], doc["params"][0])
    raise ValueError(f"unknown policy type {kind!r}")
