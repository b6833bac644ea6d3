"""Training loops: learning-rate strategies, the multi-task loop itself,
per-task baselines, fine-tuning from checkpoints, and checkpoint files.

Every batch comes from exactly one task. The task is chosen by the
sampling policy, the batch uniformly with replacement inside that task's
train split. Runs are fully deterministic per seed: model init, task
draws, and batch draws each use their own seeded stream.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import nd
from .backbone import BackboneConfig, MultiTaskModel
from .dypa import DypaConfig, allocate, fixed_allocation, score_tasks
from .errors import CheckpointError, ConfigurationError, ProgressError
from .evaluation import evaluate
from .heads import HeadConfig
from .sampling import AlphaSchedule, SamplingPolicy, alpha_at

LR_KINDS = ("fixed", "freeze_then_unfreeze", "warmup_step")

CHECKPOINT_VERSION = 1

# model-init / task-draw / batch-draw sub-streams of the run seed
_S_INIT, _S_SAMPLER, _S_BATCH = 0, 1, 2


@dataclass
class LrPolicy:
    """Learning rate (and backbone-freeze state) as a function of progress.

    Breakpoints are fractions of total training, so shrinking the epoch
    count rescales the shape instead of clipping it. Defaults follow the
    reference 15-epoch runs: warm-up over the first 4 epochs, drops at 8
    and 12; the freeze strategy unfreezes after 4.
    """

    kind: str = "fixed"
    lr_low: float = 1e-5
    lr_high: float = 1e-4
    warmup_end: float = 4 / 15
    drop1: float = 8 / 15
    drop2: float = 12 / 15
    unfreeze_at: float = 4 / 15

    def __post_init__(self):
        if self.kind not in LR_KINDS:
            raise ConfigurationError(f"unknown lr policy kind {self.kind!r}")
        if min(self.lr_low, self.lr_high) <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not (0 < self.warmup_end < self.drop1 < self.drop2 < 1):
            raise ConfigurationError("breakpoints must increase strictly inside (0,1)")
        if not (0 < self.unfreeze_at < 1):
            raise ConfigurationError("unfreeze_at must lie inside (0,1)")


def lr_at(policy: LrPolicy, p: float):
    """(learning rate, backbone frozen?) at progress p in [0,1]."""
    if not (0.0 <= p <= 1.0):
        raise ProgressError(f"progress {p} outside [0,1]")
    if policy.kind == "fixed":
        return policy.lr_low, False
    if policy.kind == "freeze_then_unfreeze":
        if p < policy.unfreeze_at:
            return policy.lr_high, True
        return policy.lr_low, False
    if p < policy.warmup_end:
        frac = p / policy.warmup_end
        return policy.lr_low + (policy.lr_high - policy.lr_low) * frac, False
    if p < policy.drop1:
        return policy.lr_high, False
    if p < policy.drop2:
        return policy.lr_high / 10.0, False
    return policy.lr_high / 100.0, False


@dataclass
class TrainSettings:
    """Everything needed to build and train a model on a dataset."""

    backbone: BackboneConfig = BackboneConfig()
    head_kind: str = "attention"
    d_t: int = 16
    attn_heads: int = 2
    dypa: DypaConfig | None = None
    schedule: AlphaSchedule = field(default_factory=AlphaSchedule)
    repetition_k: int = 1
    lr_policy: LrPolicy = field(default_factory=LrPolicy)
    batch_size: int = 8
    epochs: int = 15
    weight_decay: float = 0.01
    eval_points: int = 10
    freeze_embeddings: bool = False
    seed: int = 0


def make_allocation(dataset, settings: TrainSettings):
    if settings.dypa is not None:
        scores = score_tasks(dataset.tasks, settings.dypa.source)
        return allocate(dataset.tasks, scores, settings.dypa, settings.backbone.hidden)
    return fixed_allocation(
        dataset.tasks, settings.head_kind, settings.backbone.hidden,
        settings.d_t, settings.attn_heads,
    )


def build_model(dataset, settings: TrainSettings) -> MultiTaskModel:
    if dataset.vocab_size > settings.backbone.vocab:
        raise ConfigurationError(
            f"dataset vocabulary {dataset.vocab_size} exceeds backbone table "
            f"{settings.backbone.vocab}"
        )
    if dataset.d_img != settings.backbone.d_img:
        raise ConfigurationError(
            f"dataset d_img {dataset.d_img} != backbone d_img {settings.backbone.d_img}"
        )
    return MultiTaskModel(settings.backbone, make_allocation(dataset, settings),
                          seed=settings.seed)


@dataclass
class TrainRun:
    dataset: object
    model: MultiTaskModel
    schedule: AlphaSchedule
    lr_policy: LrPolicy
    repetition_k: int = 1
    batch_size: int = 8
    epochs: int = 15
    weight_decay: float = 0.01
    eval_points: int = 10
    freeze_embeddings: bool = False
    seed: int = 0
    out_dir: str | None = None
    fingerprint: str = ""


@dataclass
class TrainResult:
    status: str  # "converged" | "diverged"
    metrics: list  # one dict per evaluation point
    report: object  # final MetricReport, None when diverged
    checkpoint_path: str | None
    model: MultiTaskModel
    total_iterations: int


def make_run(dataset, settings: TrainSettings, out_dir=None, fingerprint="") -> TrainRun:
    return TrainRun(
        dataset=dataset,
        model=build_model(dataset, settings),
        schedule=settings.schedule,
        lr_policy=settings.lr_policy,
        repetition_k=settings.repetition_k,
        batch_size=settings.batch_size,
        epochs=settings.epochs,
        weight_decay=settings.weight_decay,
        eval_points=settings.eval_points,
        freeze_embeddings=settings.freeze_embeddings,
        seed=settings.seed,
        out_dir=out_dir,
        fingerprint=fingerprint,
    )


def iterations_for(dataset, batch_size: int, epochs: int):
    """(total iterations, iterations per epoch), exact ceil division."""
    per_epoch = math.ceil(dataset.total_train() / batch_size)
    return epochs * per_epoch, per_epoch


def train(run: TrainRun) -> TrainResult:
    """Run the loop to completion or divergence; see module docstring."""
    dataset, model = run.dataset, run.model
    total, per_epoch = iterations_for(dataset, run.batch_size, run.epochs)
    params = model.parameters()
    sampler = SamplingPolicy(run.schedule, run.repetition_k, seed=[run.seed, _S_SAMPLER])
    batch_rng = np.random.default_rng([run.seed, _S_BATCH])
    state = nd.AdamState()
    sizes = dataset.train_sizes()
    task_ids = [t.task_id for t in dataset.tasks]
    eval_every = max(1, total // max(1, run.eval_points))

    metrics = []
    status = "converged"
    frozen_now = None
    loss_sum, loss_n = 0.0, 0

    for i in range(total):
        p = i / total
        lr, frozen = lr_at(run.lr_policy, p)
        if frozen != frozen_now:
            model.set_frozen(frozen, run.freeze_embeddings)
            frozen_now = frozen
        chosen = sampler.next_task(sizes, i, total)
        tid = task_ids[chosen]
        pool = dataset.train[tid]
        take = min(run.batch_size, len(pool))
        batch = [pool[j] for j in batch_rng.integers(0, len(pool), size=take)]

        nd.zero_grads(params)
        loss = model.loss(batch, tid)
        loss_val = loss.item()
        loss.backward()
        nd.adamw_step(params, state, lr=lr, weight_decay=run.weight_decay)

        if not math.isfinite(loss_val) or not nd.all_finite(params):
            status = "diverged"
            metrics.append({
                "iteration": i + 1,
                "epoch_fraction": round((i + 1) / per_epoch, 6),
                "alpha": alpha_at(run.schedule, p),
                "lr": lr,
                "loss": loss_val if math.isfinite(loss_val) else None,
                "mean_acc": None, "t10_acc": None, "b10_acc": None,
                "status": status,
            })
            break
        loss_sum += loss_val
        loss_n += 1

        if (i + 1) % eval_every == 0 or i + 1 == total:
            report = evaluate(model, dataset, fingerprint=run.fingerprint)
            metrics.append({
                "iteration": i + 1,
                "epoch_fraction": round((i + 1) / per_epoch, 6),
                "alpha": alpha_at(run.schedule, p),
                "lr": lr,
                "loss": loss_sum / max(1, loss_n),
                "mean_acc": report.mean_acc,
                "t10_acc": report.t10_acc,
                "b10_acc": report.b10_acc,
            })
            loss_sum, loss_n = 0.0, 0

    final_report = None
    checkpoint_path = None
    if status == "converged":
        final_report = evaluate(model, dataset, fingerprint=run.fingerprint)
        if run.out_dir:
            checkpoint_path = os.path.join(run.out_dir, "model.npz")
    if run.out_dir:
        os.makedirs(run.out_dir, exist_ok=True)
        with open(os.path.join(run.out_dir, "metrics.jsonl"), "w") as f:
            for row in metrics:
                f.write(json.dumps(row, sort_keys=True))
                f.write("\n")
        if checkpoint_path:
            save_checkpoint(model, checkpoint_path, extra={"fingerprint": run.fingerprint})
    return TrainResult(status, metrics, final_report, checkpoint_path, model, total)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: MultiTaskModel, path: str, extra=None) -> None:
    """Versioned container: parameter arrays + config needed to rebuild."""
    params = model.parameters()
    cfg = model.backbone.config
    meta = {
        "version": CHECKPOINT_VERSION,
        "backbone": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "allocation": {
            str(tid): {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
            for tid, cfg in model.allocation.items()
        },
        "names": [p.name for p in params],
        "trainable": [bool(p.trainable) for p in params],
        "extra": extra or {},
    }
    arrays = {f"p{i:04d}": p.data for i, p in enumerate(params)}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path: str):
    """Rebuild the model a checkpoint was saved from. Returns (model, meta)."""
    try:
        bundle = np.load(path)
    except (FileNotFoundError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    with bundle:
        try:
            meta = json.loads(bytes(bundle["meta"]).decode())
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint metadata unreadable: {exc}") from None
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
        backbone_cfg = BackboneConfig(**meta["backbone"])
        allocation = {int(k): HeadConfig(**v) for k, v in meta["allocation"].items()}
        model = MultiTaskModel(backbone_cfg, allocation, seed=0)
        params = model.parameters()
        if [p.name for p in params] != meta["names"]:
            raise CheckpointError("checkpoint parameter names do not match rebuild")
        for i, p in enumerate(params):
            arr = bundle[f"p{i:04d}"]
            if arr.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {p.name}")
            p.tensor.data[...] = arr
            p.trainable = bool(meta["trainable"][i])
    return model, meta


# ---------------------------------------------------------------------------
# single-task runs: baselines and fine-tuning
# ---------------------------------------------------------------------------


def _single_task_settings(settings: TrainSettings, epochs: int, seed) -> TrainSettings:
    return TrainSettings(
        backbone=settings.backbone,
        head_kind=settings.head_kind,
        d_t=settings.d_t,
        attn_heads=settings.attn_heads,
        dypa=None,  # quartiles need >= 4 tasks; single-task heads are fixed
        schedule=AlphaSchedule(kind="constant", alpha_start=0.0),
        repetition_k=1,
        lr_policy=settings.lr_policy,
        batch_size=settings.batch_size,
        epochs=epochs,
        weight_decay=settings.weight_decay,
        eval_points=settings.eval_points,
        freeze_embeddings=settings.freeze_embeddings,
        seed=seed,
    )


def train_baseline(dataset, task_id: int, settings: TrainSettings,
                   out_dir=None) -> TrainResult:
    """Identical architecture, one task, from scratch."""
    view = dataset.single_task_view(task_id)
    single = _single_task_settings(settings, settings.epochs, settings.seed)
    return train(make_run(view, single, out_dir=out_dir))


def finetune(dataset, task_id: int, settings: TrainSettings,
             checkpoint_path: str | None = None, epochs: int = 10,
             out_dir=None) -> TrainResult:
    """Fine-tune on one task, starting from a checkpoint's shared weights
    or from random init when checkpoint_path is None. The task head is
    always fresh; all parameters train."""
    view = dataset.single_task_view(task_id)
    single = _single_task_settings(settings, epochs, settings.seed)
    run = make_run(view, single, out_dir=out_dir)
    if checkpoint_path is not None:
        source, _ = load_checkpoint(checkpoint_path)
        if source.backbone.config != settings.backbone:
            raise CheckpointError(
                f"checkpoint backbone {source.backbone.config} does not match "
                f"configured backbone {settings.backbone}"
            )
        for dst, src in zip(run.model.backbone.params, source.backbone.params):
            if dst.name != src.name or dst.data.shape != src.data.shape:
                raise CheckpointError(f"backbone parameter mismatch at {dst.name}")
            dst.tensor.data[...] = src.data
    return train(run)
