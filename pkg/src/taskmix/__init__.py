"""taskmix: desk-scale multi-task learning with interpolated task sampling.

One transformer backbone, one classification head per task, and a sampler
that draws each batch's task with probability proportional to N_T^alpha.
The package covers dataset generation, the training loop with alpha-decay
schedules and quartile-sized heads, evaluation cohorts, checkpoints, and a
CLI (`taskmix`) that renders figures next to the delimited output.
"""

from .backbone import BackboneConfig, MultiTaskModel
from .config import ExperimentConfig
from .data import Example, GenConfig, MultiTaskDataset, TaskSpec, export, generate, ingest
from .dypa import DypaConfig, allocate, score_tasks
from .errors import TaskmixError
from .evaluation import Comparison, MetricReport, compare, evaluate
from .heads import HeadConfig, param_count
from .sampling import AlphaSchedule, SamplingPolicy, alpha_at, task_distribution
from .training import (
    LrPolicy,
    TrainSettings,
    finetune,
    load_checkpoint,
    make_run,
    save_checkpoint,
    train,
    train_baseline,
)

__version__ = "0.1.0"

__all__ = [
    "AlphaSchedule",
    "BackboneConfig",
    "Comparison",
    "DypaConfig",
    "Example",
    "ExperimentConfig",
    "GenConfig",
    "HeadConfig",
    "LrPolicy",
    "MetricReport",
    "MultiTaskDataset",
    "MultiTaskModel",
    "SamplingPolicy",
    "TaskSpec",
    "TaskmixError",
    "TrainSettings",
    "allocate",
    "alpha_at",
    "compare",
    "evaluate",
    "export",
    "finetune",
    "generate",
    "ingest",
    "load_checkpoint",
    "make_run",
    "param_count",
    "save_checkpoint",
    "score_tasks",
    "task_distribution",
    "train",
    "train_baseline",
]
