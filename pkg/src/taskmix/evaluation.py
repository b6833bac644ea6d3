"""Per-task accuracy metrics and cross-run comparison tables.

mean_acc is the unweighted mean of per-task test accuracies. T10/B10 are
the means over the 10% of tasks (ceil, ties by ascending task_id) with the
most / fewest training examples, the cohorts where sampling policy shows
up most clearly.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ComparisonError, EvaluationError

EVAL_BATCH = 128


@dataclass
class MetricReport:
    # task name -> {"accuracy", "train_count", "task_id"}; names survive
    # renumbering, so reports from different datasets stay comparable
    per_task: dict
    mean_acc: float
    t10_acc: float
    b10_acc: float
    t10_names: list
    b10_names: list
    n10: int
    fingerprint: str = ""
    created: str = ""


def accuracy_on(model, examples, task_id: int) -> float:
    if not examples:
        raise EvaluationError(f"task {task_id} has no test examples")
    hits = 0
    for lo in range(0, len(examples), EVAL_BATCH):
        chunk = examples[lo : lo + EVAL_BATCH]
        logits = model.logits(chunk, task_id).data
        preds = logits.argmax(axis=-1)
        hits += int((preds == np.array([e.label for e in chunk])).sum())
    return hits / len(examples)


def cohort_names(entries, n10: int):
    """entries: (name, train_count, task_id). Returns (top, bottom) name lists."""
    top = sorted(entries, key=lambda e: (-e[1], e[2]))[:n10]
    bottom = sorted(entries, key=lambda e: (e[1], e[2]))[:n10]
    return [e[0] for e in top], [e[0] for e in bottom]


def evaluate(model, dataset, cohort_by: str = "train", fingerprint: str = "") -> MetricReport:
    """Accuracy on every task's held-out split plus the three aggregates.

    cohort_by picks the example counts that define T10/B10: the train
    split (default) or train+test totals.
    """
    if cohort_by not in ("train", "total"):
        raise EvaluationError(f"unknown cohort basis {cohort_by!r}")
    per_task = {}
    for t in dataset.tasks:
        acc = accuracy_on(model, dataset.test[t.task_id], t.task_id)
        count = len(dataset.train[t.task_id])
        if cohort_by == "total":
            count += len(dataset.test[t.task_id])
        per_task[t.name] = {
            "accuracy": acc,
            "train_count": count,
            "task_id": t.task_id,
        }
    n10 = math.ceil(0.1 * len(per_task))
    entries = [(nm, v["train_count"], v["task_id"]) for nm, v in per_task.items()]
    t10, b10 = cohort_names(entries, n10)
    accs = {nm: v["accuracy"] for nm, v in per_task.items()}
    return MetricReport(
        per_task=per_task,
        mean_acc=float(np.mean(list(accs.values()))),
        t10_acc=float(np.mean([accs[nm] for nm in t10])),
        b10_acc=float(np.mean([accs[nm] for nm in b10])),
        t10_names=t10,
        b10_names=b10,
        n10=n10,
        fingerprint=fingerprint,
        created=datetime.datetime.now(datetime.timezone.utc).isoformat(),
    )


@dataclass
class ComparisonRow:
    label: str
    mean_acc: float
    t10_acc: float
    b10_acc: float
    d_mean: float
    d_t10: float
    d_b10: float


@dataclass
class Comparison:
    rows: list
    task_names: list  # the common evaluation set
    n10: int

    def to_text(self) -> str:
        lines = [
            f"comparison over {len(self.task_names)} common tasks "
            f"(cohort size {self.n10})",
            f"{'run':<28} {'mean':>7} {'t10':>7} {'b10':>7} "
            f"{'d_mean':>8} {'d_t10':>8} {'d_b10':>8}",
        ]
        for r in self.rows:
            lines.append(
                f"{r.label:<28} {r.mean_acc:7.4f} {r.t10_acc:7.4f} {r.b10_acc:7.4f} "
                f"{r.d_mean:+8.4f} {r.d_t10:+8.4f} {r.d_b10:+8.4f}"
            )
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["label,mean_acc,t10_acc,b10_acc,d_mean,d_t10,d_b10"]
        for r in self.rows:
            lines.append(
                f"{r.label},{r.mean_acc:.6f},{r.t10_acc:.6f},{r.b10_acc:.6f},"
                f"{r.d_mean:.6f},{r.d_t10:.6f},{r.d_b10:.6f}"
            )
        return "\n".join(lines) + "\n"


def compare(reports, labels=None, baseline: int = 0) -> Comparison:
    """Align reports on their common task set and tabulate deltas.

    Runs trained on superset task collections are restricted to the
    intersection; aggregates are recomputed there. Cohort membership uses
    the baseline report's train counts so every row ranks the same tasks.
    """
    if not reports:
        raise ComparisonError("nothing to compare")
    labels = labels or [f"run{i}" for i in range(len(reports))]
    if len(labels) != len(reports):
        raise ComparisonError("one label per report required")
    common = set(reports[0].per_task)
    for r in reports[1:]:
        common &= set(r.per_task)
    if not common:
        raise ComparisonError("reports share no tasks")
    base = reports[baseline]
    names = sorted(common, key=lambda nm: base.per_task[nm]["task_id"])
    n10 = math.ceil(0.1 * len(names))
    entries = [(nm, base.per_task[nm]["train_count"], base.per_task[nm]["task_id"])
               for nm in names]
    t10, b10 = cohort_names(entries, n10)

    def aggregates(report):
        accs = {nm: report.per_task[nm]["accuracy"] for nm in names}
        return (
            float(np.mean(list(accs.values()))),
            float(np.mean([accs[nm] for nm in t10])),
            float(np.mean([accs[nm] for nm in b10])),
        )

    base_agg = aggregates(base)
    rows = []
    for label, report in zip(labels, reports):
        agg = aggregates(report)
        rows.append(ComparisonRow(
            label, *agg,
            agg[0] - base_agg[0], agg[1] - base_agg[1], agg[2] - base_agg[2],
        ))
    return Comparison(rows=rows, task_names=names, n10=n10)
