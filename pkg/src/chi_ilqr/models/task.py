from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..hybrid import HybridSystem
from ..ilqr import CostWeights, Problem


@dataclass(frozen=True)
class TaskSpec:
    x0: np.ndarray
    mode0: str
    x_goal: np.ndarray
    duration: float
    N: int
    weights: Optional[CostWeights] = None

    def problem(self, system: HybridSystem, weights: Optional[CostWeights] = None) -> Problem:
        w = weights if weights is not None else self.weights
        if w is None:
            raise ValueError("task has no cost weights")
        if np.shape(w.x_goal) != np.shape(self.x0):
            raise ValueError("goal and initial state dimensions differ")
        return Problem(system, np.asarray(self.x0, dtype=float), self.mode0, w, self.duration, self.N)
