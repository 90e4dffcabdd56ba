"""File formats: trajectory CSV, distance-matrix CSV, run manifests, atomic writes."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .gmm import StateDataset
from .supervector import DistanceMatrix


def fmt(x: float) -> str:
    """Nine significant digits; integers and -0.0 come out canonical."""
    s = f"{float(x):.9g}"
    return "0" if s == "-0" else s


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


# -- trajectories --------------------------------------------------------------

def dataset_to_csv(data: StateDataset) -> str:
    """Header ``episode,step,reward,s0..s{d-1}``; one row per recorded state."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "step", "reward", *(f"s{j}" for j in range(data.d))])
    rewards = data.rewards if data.rewards is not None else np.zeros(data.n_states)
    row = 0
    for ep, length in enumerate(data.episode_lengths):
        for step in range(int(length)):
            w.writerow([ep, step, fmt(rewards[row]), *(fmt(v) for v in data.states[row])])
            row += 1
    return buf.getvalue()


def dataset_from_csv(text: str) -> StateDataset:
    """Parse the trajectory CSV. Episode returns are the sums of the reward column."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty trajectory file") from None
    if header[:3] != ["episode", "step", "reward"] or len(header) < 4:
        raise ValueError("trajectory header must be episode,step,reward,s0,...")
    d = len(header) - 3
    if header[3:] != [f"s{j}" for j in range(d)]:
        raise ValueError("state columns must be named s0..s{d-1}")
    keys, rewards, states = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        keys.append((int(row[0]), int(row[1])))
        rewards.append(float(row[2]))
        states.append([float(v) for v in row[3:]])
    if not keys:
        raise ValueError("trajectory file has no rows")
    if keys != sorted(keys) or len(set(keys)) != len(keys):
        raise ValueError("rows must be sorted by (episode, step) without duplicates")
    episodes = [k[0] for k in keys]
    ids, lengths = np.unique(episodes, return_counts=True)
    rewards_arr = np.asarray(rewards)
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    returns = [float(rewards_arr[bounds[i]:bounds[i + 1]].sum()) for i in range(len(ids))]
    return StateDataset(np.asarray(states), lengths, returns, rewards_arr)


# -- distance matrices -----------------------------------------------------------

def distance_matrix_to_csv(m: DistanceMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(m.ids))
    for row in m.values:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def distance_matrix_from_csv(text: str) -> DistanceMatrix:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if len(rows) < 2:
        raise ValueError("distance file needs a header and at least one row")
    ids = rows[0]
    values = np.array([[float(v) for v in r] for r in rows[1:]])
    return DistanceMatrix(values, ids)


# -- manifests -------------------------------------------------------------------

@dataclass
class RunManifest:
    """Everything needed to rerun a command: its arguments, seeds and input hashes.

    ``outputs`` maps output names (relative to the output location) to SHA-256
    digests so a replay can be checked byte for byte.
    """

    command: str
    config: dict
    seeds: list
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        doc = json.loads(text)
        missing = {"command", "config", "seeds"} - set(doc)
        if missing:
            raise ValueError(f"manifest lacks {sorted(missing)}")
        return cls(**{k: doc[k] for k in ("command", "config", "seeds", "inputs", "outputs", "version")
                      if k in doc})
