"""Task selection for single-task batches.

The probability of drawing task T is N_T^alpha / sum_t N_t^alpha: alpha=1
draws proportionally to data size, alpha=0 uniformly, and a decay schedule
moves alpha between the two over the course of training. A repetition knob
re-uses the drawn task for k consecutive iterations before sampling again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ProgressError

SCHEDULE_KINDS = ("constant", "linear", "exponential", "cosine", "demon")


@dataclass
class AlphaSchedule:
    """Decay curve for the sampling exponent, evaluated on progress in [0,1].

    All kinds hit alpha_start at p=0 and alpha_end at p=1 exactly. exp_rate
    is the curvature of the exponential kind; demon_ref the reference
    momentum of the demon kind. Neither affects the other kinds.
    """

    kind: str = "exponential"
    alpha_start: float = 1.0
    alpha_end: float = 0.1
    exp_rate: float = 5.0
    demon_ref: float = 0.9

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant":
            self.alpha_end = self.alpha_start
        if not (0.0 <= self.alpha_end <= self.alpha_start <= 1.0):
            raise ConfigurationError(
                "need 0 <= alpha_end <= alpha_start <= 1, got "
                f"start={self.alpha_start} end={self.alpha_end}"
            )
        if self.exp_rate <= 0:
            raise ConfigurationError("exp_rate must be positive")
        if not (0.0 < self.demon_ref < 1.0):
            raise ConfigurationError("demon_ref must lie in (0,1)")


def alpha_at(schedule: AlphaSchedule, p: float) -> float:
    """Evaluate the schedule at progress p in [0,1]."""
    if not (0.0 <= p <= 1.0):
        raise ProgressError(f"progress {p} outside [0,1]")
    s, e = schedule.alpha_start, schedule.alpha_end
    if schedule.kind == "constant":
        return s
    if schedule.kind == "linear":
        return s + (e - s) * p
    if schedule.kind == "cosine":
        return e + (s - e) * (1.0 + math.cos(math.pi * p)) / 2.0
    if schedule.kind == "exponential":
        c = schedule.exp_rate
        return e + (s - e) * (math.exp(-c * p) - math.exp(-c)) / (1.0 - math.exp(-c))
    # demon: normalized remaining-decay shape, concave slow-then-fast
    b = schedule.demon_ref
    rem = (1.0 - p) / ((1.0 - b) + b * (1.0 - p))
    return e + (s - e) * rem


def task_distribution(sizes, alpha: float) -> np.ndarray:
    """Probability vector p_T = N_T^alpha / sum N_t^alpha."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ConfigurationError("task_distribution needs at least one task")
    if sizes.min() < 1:
        raise ConfigurationError("every task needs at least one example")
    if not (0.0 <= alpha <= 1.0):
        raise ConfigurationError(f"alpha {alpha} outside [0,1]")
    w = sizes**alpha
    return w / w.sum()


class SamplingPolicy:
    """Stateful task chooser for one training run.

    Holds the schedule, the repetition interval k (a freshly drawn task is
    kept for k consecutive iterations), and a seeded RNG. Confined to a
    single run; not safe to share across threads.
    """

    def __init__(self, schedule: AlphaSchedule, repetition_k: int = 1, seed=0):
        if repetition_k < 1:
            raise ConfigurationError("repetition_k must be >= 1")
        self.schedule = schedule
        self.repetition_k = int(repetition_k)
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._last = None

    def next_task(self, sizes, iteration: int, total_iterations: int) -> int:
        """Task id for one iteration; repeats the previous draw off-cycle."""
        if total_iterations < 1:
            raise ConfigurationError("total_iterations must be >= 1")
        if not (0 <= iteration < total_iterations):
            raise ProgressError(
                f"iteration {iteration} outside [0, {total_iterations})"
            )
        if iteration % self.repetition_k != 0 and self._last is not None:
            return self._last
        alpha = alpha_at(self.schedule, iteration / total_iterations)
        probs = task_distribution(sizes, alpha)
        u = self._rng.random()
        self._last = int(min(np.searchsorted(np.cumsum(probs), u, side="right"),
                             len(probs) - 1))
        return self._last

    def sample_sequence(self, sizes, total_iterations: int) -> np.ndarray:
        """Task ids for iterations 0..total_iterations-1.

        For a constant schedule with k=1 the draws are vectorized; the RNG
        consumption is identical to repeated next_task calls either way.
        """
        if self.schedule.kind == "constant" and self.repetition_k == 1:
            probs = task_distribution(sizes, self.schedule.alpha_start)
            u = self._rng.random(total_iterations)
            ids = np.minimum(np.searchsorted(np.cumsum(probs), u, side="right"),
                             len(probs) - 1)
            if total_iterations:
                self._last = int(ids[-1])
            return ids.astype(np.int64)
        out = np.empty(total_iterations, dtype=np.int64)
        for i in range(total_iterations):
            out[i] = self.next_task(sizes, i, total_iterations)
        return out


def next_task(policy: SamplingPolicy, sizes, iteration, total_iterations) -> int:
    return policy.next_task(sizes, iteration, total_iterations)
