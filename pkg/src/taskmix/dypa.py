"""Dynamic per-task head sizing by complexity quartile.

Tasks are ranked by a complexity proxy (label count by default, training
example count as the alternative), cut into four balanced quartiles, and
each quartile's attention heads get a width that grows geometrically:
base_dt in the lowest quartile, base_dt * growth^3 in the highest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .heads import DT_OVER_BACKBONE_LIMIT, HeadConfig, param_count

COMPLEXITY_SOURCES = ("class_count", "example_count")


@dataclass
class DypaConfig:
    base_dt: int = 8
    growth: int = 2
    attn_heads: int = 2
    source: str = "class_count"

    def __post_init__(self):
        if self.base_dt < 1 or self.growth < 1:
            raise ConfigurationError("base_dt and growth must be >= 1")
        if self.source not in COMPLEXITY_SOURCES:
            raise ConfigurationError(f"unknown complexity source {self.source!r}")


@dataclass
class ComplexityScore:
    task_id: int
    raw: float  # proxy count
    normalized: float  # z-score of log raw, reporting only
    quartile: int  # 1..4, by rank


def score_tasks(tasks, source: str = "class_count"):
    """Rank tasks into quartiles by the chosen complexity proxy.

    Binning is rank-based with ties broken by ascending task_id, so any
    strictly increasing transform of the counts gives the same assignment.
    Bin sizes differ by at most one; the lower quartiles absorb remainders.
    """
    if source not in COMPLEXITY_SOURCES:
        raise ConfigurationError(f"unknown complexity source {source!r}")
    tasks = sorted(tasks, key=lambda t: t.task_id)
    k = len(tasks)
    if k < 4:
        raise ConfigurationError(
            f"quartile allocation needs >= 4 tasks, got {k}; use fixed-size heads"
        )
    raw = np.array(
        [t.num_examples if source == "example_count" else t.num_classes for t in tasks],
        dtype=np.float64,
    )
    logs = np.log(raw)
    std = logs.std()
    z = (logs - logs.mean()) / std if std > 0 else np.zeros(k)
    order = np.argsort(raw, kind="stable")  # stable => ties by ascending task_id
    ceil_n, floor_n = -(-k // 4), k // 4
    big_bins = k % 4
    quart_of_rank = np.empty(k, dtype=np.int64)
    for r in range(k):
        if r < big_bins * ceil_n:
            quart_of_rank[r] = r // ceil_n
        else:
            quart_of_rank[r] = big_bins + (r - big_bins * ceil_n) // floor_n
    scores = [None] * k
    for rank, pos in enumerate(order):
        t = tasks[pos]
        scores[pos] = ComplexityScore(
            task_id=t.task_id,
            raw=float(raw[pos]),
            normalized=float(z[pos]),
            quartile=int(quart_of_rank[rank]) + 1,
        )
    return scores


def quartile_width(cfg: DypaConfig, quartile: int) -> int:
    return cfg.base_dt * cfg.growth ** (quartile - 1)


def allocate(tasks, scores, cfg: DypaConfig, d_backbone: int):
    """HeadAllocation: task_id -> attention HeadConfig sized by quartile."""
    top = quartile_width(cfg, 4)
    if top > DT_OVER_BACKBONE_LIMIT * d_backbone:
        raise ConfigurationError(
            f"widest quartile d_t={top} exceeds {DT_OVER_BACKBONE_LIMIT}x "
            f"backbone width {d_backbone}"
        )
    by_id = {t.task_id: t for t in tasks}
    alloc = {}
    for s in scores:
        d_t = quartile_width(cfg, s.quartile)
        if d_t % cfg.attn_heads:
            raise ConfigurationError(
                f"quartile width {d_t} not divisible by {cfg.attn_heads} heads"
            )
        alloc[s.task_id] = HeadConfig(
            kind="attention",
            d_backbone=d_backbone,
            num_classes=by_id[s.task_id].num_classes,
            d_t=d_t,
            attn_heads=cfg.attn_heads,
        )
    return alloc


def fixed_allocation(tasks, kind: str, d_backbone: int, d_t: int = 0, attn_heads: int = 2):
    """Every task gets the same head shape (the no-DyPA arms)."""
    return {
        t.task_id: HeadConfig(
            kind=kind,
            d_backbone=d_backbone,
            num_classes=t.num_classes,
            d_t=d_t,
            attn_heads=attn_heads,
        )
        for t in tasks
    }


def allocation_param_total(alloc) -> int:
    return sum(param_count(cfg) for cfg in alloc.values())
