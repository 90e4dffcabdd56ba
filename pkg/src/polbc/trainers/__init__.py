"""Application experiments: constrained policy-gradient training and novelty search."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LearningCurve:
    """Per-iteration return plus one auxiliary series (stop flags or novelty)."""

    returns: list[float] = field(default_factory=list)
    aux: list[float] = field(default_factory=list)
    seed: int = 0

    def append(self, ret: float, aux: float) -> None:
        self.returns.append(float(ret))
        self.aux.append(float(aux))

    def auc(self) -> float:
        return float(np.mean(self.returns)) if self.returns else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "mean_return", "aux"])
        for i, (r, a) in enumerate(zip(self.returns, self.aux)):
            w.writerow([i, f"{r:.9g}", f"{a:.9g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seed: int = 0) -> "LearningCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([float(r["mean_return"]) for r in rows], [float(r["aux"]) for r in rows], seed)
