"""Native test environments and the data-gathering loop."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .gmm import StateDataset

# row/col offsets for U, D, L, R
GRID_MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])
GRID_ACTIONS = "UDLR"


# -- grid world --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridLayout:
    walls: np.ndarray
    start: tuple[int, int]
    goal: tuple[int, int] | None

    def __post_init__(self):
        walls = np.asarray(self.walls, dtype=bool)
        object.__setattr__(self, "walls", walls)
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if cell is None:
                continue
            r, c = cell
            if not (0 <= r < walls.shape[0] and 0 <= c < walls.shape[1]):
                raise ValueError(f"{name} cell {cell} is outside the grid")
            if walls[r, c]:
                raise ValueError(f"{name} cell {cell} is a wall")

    @property
    def shape(self) -> tuple[int, int]:
        return self.walls.shape

    @classmethod
    def parse(cls, text: str) -> "GridLayout":
        """Rows of tokens: ``.`` free, ``#`` wall, ``S`` start, ``G`` goal."""
        rows = [line.split() for line in text.strip().splitlines() if line.strip()]
        if len({len(r) for r in rows}) != 1:
            raise ValueError("layout rows have different lengths")
        walls = np.zeros((len(rows), len(rows[0])), dtype=bool)
        start = goal = None
        for i, row in enumerate(rows):
            for j, tok in enumerate(row):
                if tok == "#":
                    walls[i, j] = True
                elif tok == "S":
                    start = (i, j)
                elif tok == "G":
                    goal = (i, j)
                elif tok != ".":
                    raise ValueError(f"unknown layout token {tok!r}")
        if start is None:
            raise ValueError("layout has no start cell")
        return cls(walls, start, goal)

    def move(self, cell, action: int) -> tuple[int, int]:
        r, c = cell[0] + GRID_MOVES[action][0], cell[1] + GRID_MOVES[action][1]
        h, w = self.walls.shape
        if 0 <= r < h and 0 <= c < w and not self.walls[r, c]:
            return int(r), int(c)
        return int(cell[0]), int(cell[1])

    def shortest_path(self) -> int | None:
        if self.goal is None:
            return None
        seen = {self.start: 0}
        queue = deque([self.start])
        while queue:
            cell = queue.popleft()
            if cell == self.goal:
                return seen[cell]
            for a in range(4):
                nxt = self.move(cell, a)
                if nxt not in seen:
                    seen[nxt] = seen[cell] + 1
                    queue.append(nxt)
        return None


class GridWorld:
    """Grid with walls and a slip probability.

    With probability ``epsilon`` the chosen direction is replaced by a
    uniformly random one. Reaching the goal pays
    ``1 - (steps - shortest) / max_steps`` and ends the episode.
    """

    def __init__(self, layout: GridLayout, epsilon: float = 0.0, max_steps: int = 50):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must be a probability")
        if max_steps < 1:
            raise ValueError("max_steps must be positive")
        self.layout = layout
        self.epsilon = float(epsilon)
        self.max_steps = int(max_steps)
        self.shortest = layout.shortest_path()
        self.n_actions = 4
        self.cell = layout.start
        self.t = 0

    def reset(self, rng=None) -> np.ndarray:
        self.cell = self.layout.start
        self.t = 0
        return np.array(self.cell, dtype=float)

    def goal_reward(self, steps: int) -> float:
        return 1.0 - (steps - self.shortest) / self.max_steps

    def step(self, action, rng: np.random.Generator):
        action = int(action)
        if not 0 <= action < 4:
            raise ValueError(f"invalid grid action {action}")
        if rng.random() < self.epsilon:
            action = int(rng.integers(4))
        self.cell = self.layout.move(self.cell, action)
        self.t += 1
        reward = 0.0
        done = self.t >= self.max_steps
        if self.cell == self.layout.goal:
            reward = self.goal_reward(self.t)
            done = True
        return np.array(self.cell, dtype=float), reward, done


def _scenario_text(name: str) -> str:
    return resources.files("polbc.data").joinpath(f"gridworld_{name}.txt").read_text(encoding="utf-8")


GRID_SCENARIOS = ("stochastic", "doorway", "unreachable")


def parse_sections(text: str) -> dict[str, str]:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        s = line.strip()
        if not s or s.startswith(";"):
            continue
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            sections[current] = []
        elif current is None:
            raise ValueError("content before the first [section] header")
        else:
            sections[current].append(s)
    return {k: "\n".join(v) for k, v in sections.items()}


def load_scenario(name: str):
    """Layout plus the blue and green tabular policies of one demonstration scenario."""
    from .policies import TabularPolicy

    if name not in GRID_SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {GRID_SCENARIOS}")
    sec = parse_sections(_scenario_text(name))
    layout = GridLayout.parse(sec["layout"])
    return layout, TabularPolicy.parse(sec["blue"], layout), TabularPolicy.parse(sec["green"], layout)


@dataclass
class GridStats:
    occupancy: np.ndarray
    mean_return: float
    total_steps: int


def simulate_grid(env: GridWorld, policy, episodes: int, rng: np.random.Generator) -> GridStats:
    """Vectorized rollouts of a tabular policy.

    Every step draws the same random numbers for every episode whether or not
    it is still running, so two policies simulated from equal seeds share
    their noise (common random numbers).
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    layout = env.layout
    h, w = layout.shape
    cum = np.cumsum(policy.probs, axis=2)
    r = np.full(episodes, layout.start[0])
    c = np.full(episodes, layout.start[1])
    alive = np.ones(episodes, dtype=bool)
    visits = np.zeros((h, w))
    returns = np.zeros(episodes)
    for t in range(env.max_steps):
        np.add.at(visits, (r[alive], c[alive]), 1.0)
        v = rng.random(episodes)
        u = rng.random(episodes)
        slip = rng.integers(4, size=episodes)
        act = np.minimum((v[:, None] > cum[r, c]).sum(axis=1), 3)
        act = np.where(u < env.epsilon, slip, act)
        nr = r + GRID_MOVES[act, 0]
        nc = c + GRID_MOVES[act, 1]
        inside = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
        ok = inside.copy()
        ok[inside] = ~layout.walls[nr[inside], nc[inside]]
        ok &= alive
        r = np.where(ok, nr, r)
        c = np.where(ok, nc, c)
        if layout.goal is not None:
            hit = alive & (r == layout.goal[0]) & (c == layout.goal[1])
            returns[hit] = env.goal_reward(t + 1)
            alive &= ~hit
        if not alive.any():
            break
    total = int(visits.sum())
    return GridStats(visits / total, float(returns.mean()), total)


def grid_occupancy(env: GridWorld, policy, episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Visits per cell divided by the total number of recorded states."""
    return simulate_grid(env, policy, episodes, rng).occupancy


def exact_grid_occupancy(env: GridWorld, policy) -> tuple[np.ndarray, float]:
    """Expected-visit occupancy and expected return, by propagating the state distribution."""
    layout = env.layout
    h, w = layout.shape
    n = h * w
    trans = np.zeros((n, n))
    for i in range(h):
        for j in range(w):
            if layout.walls[i, j]:
                continue
            probs = policy.probs[i, j]
            executed = (1.0 - env.epsilon) * probs + env.epsilon / 4.0
            for a in range(4):
                dst = layout.move((i, j), a)
                trans[i * w + j, dst[0] * w + dst[1]] += executed[a]
    goal = None if layout.goal is None else layout.goal[0] * w + layout.goal[1]
    dist = np.zeros(n)
    dist[layout.start[0] * w + layout.start[1]] = 1.0
    visits = np.zeros(n)
    expected_return = 0.0
    for t in range(env.max_steps):
        visits += dist
        dist = dist @ trans
        if goal is not None:
            expected_return += dist[goal] * env.goal_reward(t + 1)
            dist[goal] = 0.0
    return (visits / visits.sum()).reshape(h, w), float(expected_return)


def grid_action_distance(a, b) -> float:
    """Sum of absolute differences of two tabular policies over non-wall cells."""
    if a.probs.shape != b.probs.shape or not np.array_equal(a.walls, b.walls):
        raise ValueError("policies use different layouts")
    free = ~a.walls
    return float(np.abs(a.probs[free] - b.probs[free]).sum())


def grid_state_distance(p, q) -> float:
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if p.shape != q.shape:
        raise ValueError("occupancy grids have different shapes")
    return float(np.abs(p - q).sum())


def return_distance(a: StateDataset, b: StateDataset) -> float:
    if a.returns.size == 0 or b.returns.size == 0:
        raise ValueError("datasets carry no returns")
    return float(abs(a.returns.mean() - b.returns.mean()))


# -- dangerous path ----------------------------------------------------------

CORRECT, MINE, NOOP = 0, 1, 2


def dangerous_path_labels(seed: int, cell, n: int = 5) -> np.ndarray:
    """Outcome of every action in ``cell``: one correct, two mines, the rest no-ops.

    Drawn from a hash of (seed, coordinates), so the unbounded grid needs no storage.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(x) for x in cell)])
    perm = np.random.Generator(np.random.Philox(ss)).permutation(n)
    labels = np.full(n, NOOP)
    labels[perm[0]] = CORRECT
    labels[perm[1:3]] = MINE
    return labels


class DangerousPath:
    """N-dimensional lattice where one action per cell advances and two reset.

    Stepping onto a cell not yet visited this episode pays +1.
    """

    def __init__(self, n: int = 5, seed: int = 0, max_steps: int = 25):
        if n < 3:
            raise ValueError("need at least three actions (one correct, two mines)")
        self.n = int(n)
        self.seed = int(seed)
        self.max_steps = int(max_steps)
        self.n_actions = self.n
        self._labels: dict[tuple, np.ndarray] = {}
        self.pos = np.zeros(self.n, dtype=np.int64)
        self.visited: set[tuple] = set()
        self.t = 0

    def labels(self, cell) -> np.ndarray:
        key = tuple(int(x) for x in cell)
        lab = self._labels.get(key)
        if lab is None:
            lab = self._labels[key] = dangerous_path_labels(self.seed, key, self.n)
        return lab

    def correct_action(self, cell) -> int:
        return int(np.flatnonzero(self.labels(cell) == CORRECT)[0])

    def reset(self, rng=None) -> np.ndarray:
        self.pos = np.zeros(self.n, dtype=np.int64)
        self.visited = {tuple(self.pos)}
        self.t = 0
        return self.pos.astype(float)

    def step(self, action, rng=None):
        action = int(action)
        if not 0 <= action < self.n:
            raise ValueError(f"invalid action {action}")
        outcome = self.labels(self.pos)[action]
        reward = 0.0
        if outcome == CORRECT:
            self.pos = self.pos.copy()
            self.pos[action] += 1
            key = tuple(self.pos)
            if key not in self.visited:
                self.visited.add(key)
                reward = 1.0
        elif outcome == MINE:
            self.pos = np.zeros(self.n, dtype=np.int64)
        self.t += 1
        return self.pos.astype(float), reward, self.t >= self.max_steps


# -- point world -------------------------------------------------------------

class PointWorld:
    """2-D plane with an inverted-U wall around the spawn point.

    The top segment sits at ``y = wall_y`` for ``|x| <= half_width`` and the
    side segments drop to ``y = side_bottom``. Moves that would cross a wall
    stop just short of it. Reward per step is the change in y.
    """

    def __init__(self, speed: float = 0.05, max_steps: int = 99, wall_y: float = 0.65,
                 half_width: float = 1.0, side_bottom: float = -0.2):
        self.speed = float(speed)
        self.max_steps = int(max_steps)
        self.wall_y = wall_y
        self.half_width = half_width
        self.side_bottom = side_bottom
        self.segments = np.array([
            [[-half_width, wall_y], [half_width, wall_y]],
            [[-half_width, side_bottom], [-half_width, wall_y]],
            [[half_width, side_bottom], [half_width, wall_y]],
        ])
        self.n_actions = None
        self.pos = np.zeros(2)
        self.t = 0

    def move(self, pos, phi) -> np.ndarray:
        """Vectorized wall-clipped move of positions (B, 2) along angles (B,)."""
        pos = np.atleast_2d(np.asarray(pos, dtype=float))
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        v = self.speed * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        t_hit = np.ones(pos.shape[0])
        blocked = np.zeros(pos.shape[0], dtype=bool)
        for a, b in self.segments:
            e = b - a
            denom = v[:, 0] * e[1] - v[:, 1] * e[0]
            ap = a - pos
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (ap[:, 0] * e[1] - ap[:, 1] * e[0]) / denom
                u = (ap[:, 0] * v[:, 1] - ap[:, 1] * v[:, 0]) / denom
            hit = (denom != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
            closer = hit & (t < t_hit)
            t_hit = np.where(closer, t, t_hit)
            blocked |= hit
        if self.speed > 0:
            backoff = 1e-9 / self.speed
            t_hit = np.where(blocked, np.maximum(t_hit - backoff, 0.0), 1.0)
        return pos + t_hit[:, None] * v

    def reset(self, rng=None) -> np.ndarray:
        self.pos = np.zeros(2)
        self.t = 0
        return self.pos.copy()

    def step(self, action, rng=None):
        phi = float(action)
        if not (0.0 <= phi <= 2.0 * np.pi) or not np.isfinite(phi):
            raise ValueError(f"angle {phi} outside [0, 2pi]")
        new = self.move(self.pos[None, :], np.array([phi]))[0]
        reward = float(new[1] - self.pos[1])
        self.pos = new
        self.t += 1
        return new.copy(), reward, self.t >= self.max_steps


# -- data gathering ----------------------------------------------------------

@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    terminal: bool = False

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards))


def rollout(env, policy, rng: np.random.Generator) -> Trajectory:
    """One episode; each state is recorded before the action taken in it."""
    traj = Trajectory()
    state = env.reset(rng)
    done = False
    while not done:
        action = policy.sample(state, rng)
        traj.states.append(state)
        traj.actions.append(action)
        state, reward, done = env.step(action, rng)
        traj.rewards.append(reward)
    traj.terminal = True
    return traj


def trajectories_to_dataset(trajs) -> StateDataset:
    return StateDataset(
        np.array([s for t in trajs for s in t.states], dtype=float),
        [len(t.states) for t in trajs],
        [t.total_return for t in trajs],
        [r for t in trajs for r in t.rewards],
    )


def gather_data(env, policy, episodes: int, rng: np.random.Generator) -> StateDataset:
    if episodes < 1:
        raise ValueError("need at least one episode")
    return trajectories_to_dataset([rollout(env, policy, rng) for _ in range(episodes)])
