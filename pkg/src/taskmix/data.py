"""Synthetic correlated multi-task datasets, plus export/ingest.

Each task is a classification problem over latent Gaussian class prototypes.
Correlation across tasks comes from drawing prototypes out of a shared pool
with probability rho (plus per-task jitter); a task drawn mostly from the
pool overlaps other tasks in latent space even though its label space is its
own. An example's latent point is rendered two ways: text tokens quantize
its coordinates into vocabulary bins, and image embeddings are a fixed
affine projection plus noise. So both modalities carry real signal and the
whole single-stream pipeline gets exercised without any corpus or encoder.

On disk a dataset is a directory: `manifest` (JSON: version, vocab, d_img,
task table, optional generation block) and `examples.jsonl`, one record per
line in canonical order, sorted by (task_id, split, original index). Note
"test" sorts before "train".
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, IngestionError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest"
EXAMPLES_NAME = "examples.jsonl"

# sub-stream tags so parallel per-task generation stays bit-identical
_STREAM_GLOBAL = 0
_STREAM_TASK = 1
_STREAM_SPLIT = 2
_STREAM_LATE_SPLIT = 3


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class TaskSpec:
    task_id: int
    name: str
    num_classes: int
    num_examples: int  # train + test
    group_id: int


@dataclass
class Example:
    task_id: int
    label: int
    text_tokens: list
    image_embeddings: np.ndarray  # (n_images, d_img), n_images may be 0

    def __eq__(self, other):
        return (
            isinstance(other, Example)
            and self.task_id == other.task_id
            and self.label == other.label
            and list(self.text_tokens) == list(other.text_tokens)
            and self.image_embeddings.shape == other.image_embeddings.shape
            and bool((self.image_embeddings == other.image_embeddings).all())
        )


@dataclass
class GenConfig:
    num_tasks: int = 100
    d_z: int = 16
    vocab_size: int = 512
    d_img: int = 16
    rho: float = 0.7  # P(prototype copied from the shared pool)
    prototype_jitter: float = 0.25
    pool_size: int = 64
    size_median: float = 1000.0  # log-normal over examples per task
    size_sigma: float = 1.0
    min_examples: int = 8
    class_lo: int = 4  # log-uniform class count range
    class_hi: int = 128
    label_noise: float = 0.05
    latent_noise: float = 0.35
    tokens_per_example: int = 12
    images_lo: int = 0
    images_hi: int = 2
    image_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ConfigurationError("num_tasks must be >= 1")
        if min(self.d_z, self.d_img, self.pool_size, self.tokens_per_example) < 1:
            raise ConfigurationError("dimensions and pool_size must be >= 1")
        if not (2 <= self.class_lo <= self.class_hi):
            raise ConfigurationError("need 2 <= class_lo <= class_hi")
        if self.class_hi > self.vocab_size:
            raise ConfigurationError(
                f"class_hi={self.class_hi} exceeds vocab_size={self.vocab_size}"
            )
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigurationError("rho must lie in [0,1]")
        if not (0.0 <= self.label_noise < 0.5):
            raise ConfigurationError("label_noise must lie in [0, 0.5)")
        if not (0 <= self.images_lo <= self.images_hi):
            raise ConfigurationError("need 0 <= images_lo <= images_hi")
        if self.size_median <= 0 or self.size_sigma < 0:
            raise ConfigurationError("size distribution must be non-degenerate")
        if self.min_examples < 2:
            raise ConfigurationError("min_examples must be >= 2")


class MultiTaskDataset:
    """Immutable-after-construction container of tasks and split examples.

    `generation`, when present, is a JSON-compatible dict recording the
    GenConfig, the shared prototype pool, and each task's prototypes and
    pool sources; it rides along through export/ingest.
    """

    def __init__(self, tasks, train, test, vocab_size, d_img, generation=None):
        self.tasks = sorted(tasks, key=lambda t: t.task_id)
        self.train = train  # task_id -> list of Example
        self.test = test
        self.vocab_size = int(vocab_size)
        self.d_img = int(d_img)
        self.generation = generation

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise DataError(f"no task with id {task_id}")

    def train_sizes(self) -> np.ndarray:
        return np.array([len(self.train[t.task_id]) for t in self.tasks])

    def total_train(self) -> int:
        return int(self.train_sizes().sum())

    def single_task_view(self, task_id: int) -> "MultiTaskDataset":
        """One task, renumbered to id 0; name and group survive."""
        return self.subset_view([task_id])

    def subset_view(self, task_ids) -> "MultiTaskDataset":
        """The chosen tasks, renumbered densely in ascending original id.

        Names and groups survive, so reports from a subset run align with
        full-dataset runs task by task. Used to hold tasks out of joint
        training while keeping them available for later fine-tuning.
        """
        chosen = sorted(set(task_ids))
        if not chosen:
            raise DataError("subset_view needs at least one task id")
        tasks, train, test = [], {}, {}
        for new_id, old_id in enumerate(chosen):
            src = self.task(old_id)  # raises DataError on unknown ids

            def renumber(examples):
                return [Example(new_id, e.label, e.text_tokens, e.image_embeddings)
                        for e in examples]

            tasks.append(TaskSpec(new_id, src.name, src.num_classes,
                                  src.num_examples, src.group_id))
            train[new_id] = renumber(self.train[old_id])
            test[new_id] = renumber(self.test[old_id])
        return MultiTaskDataset(tasks, train, test, self.vocab_size, self.d_img)

    def __eq__(self, other):
        return (
            isinstance(other, MultiTaskDataset)
            and self.tasks == other.tasks
            and self.vocab_size == other.vocab_size
            and self.d_img == other.d_img
            and all(
                self.train[t.task_id] == other.train[t.task_id]
                and self.test[t.task_id] == other.test[t.task_id]
                for t in self.tasks
            )
            and self.generation == other.generation
        )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _task_name(task_id: int, group_id: int) -> str:
    return f"site{group_id:03d}-attr{task_id - 2 * group_id}"


def _quantize_tokens(z: np.ndarray, cfg: GenConfig) -> list:
    """Deterministic map latent coords -> token ids, cycling through coords."""
    coords = z[np.arange(cfg.tokens_per_example) % cfg.d_z]
    bins = np.floor((coords + 3.0) / 6.0 * cfg.vocab_size).astype(np.int64)
    return np.clip(bins, 0, cfg.vocab_size - 1).tolist()


def _global_streams(cfg: GenConfig):
    rng = np.random.default_rng([cfg.seed, _STREAM_GLOBAL])
    pool = rng.standard_normal((cfg.pool_size, cfg.d_z))
    proj = rng.standard_normal((cfg.d_z, cfg.d_img)) / np.sqrt(cfg.d_z)
    proj_bias = rng.standard_normal(cfg.d_img) * 0.1
    return pool, proj, proj_bias


def _generate_task(cfg, task_id, pool, proj, proj_bias, force_examples=None):
    """One task from its own (seed, task_id) stream; parallel-safe."""
    rng = np.random.default_rng([cfg.seed, _STREAM_TASK, task_id])
    u = rng.uniform(math.log(cfg.class_lo), math.log(cfg.class_hi + 1))
    num_classes = int(np.clip(int(math.exp(u)), cfg.class_lo, cfg.class_hi))
    drawn = round_half_up(math.exp(rng.normal(math.log(cfg.size_median), cfg.size_sigma)))
    num_examples = max(drawn, cfg.min_examples, num_classes)
    if force_examples is not None:
        num_examples = int(force_examples)

    prototypes = np.empty((num_classes, cfg.d_z))
    sources = []
    for c in range(num_classes):
        if rng.random() < cfg.rho:
            idx = int(rng.integers(cfg.pool_size))
            prototypes[c] = pool[idx] + rng.standard_normal(cfg.d_z) * cfg.prototype_jitter
            sources.append(idx)
        else:
            prototypes[c] = rng.standard_normal(cfg.d_z)
            sources.append(-1)

    examples = []
    for _ in range(num_examples):
        true = int(rng.integers(num_classes))
        z = prototypes[true] + rng.standard_normal(cfg.d_z) * cfg.latent_noise
        n_img = int(rng.integers(cfg.images_lo, cfg.images_hi + 1))
        imgs = z @ proj + proj_bias + rng.standard_normal((n_img, cfg.d_img)) * cfg.image_noise
        label = true
        if rng.random() < cfg.label_noise and num_classes > 1:
            label = (true + 1 + int(rng.integers(num_classes - 1))) % num_classes
        examples.append(Example(task_id, label, _quantize_tokens(z, cfg), imgs))

    group = task_id // 2
    spec = TaskSpec(task_id, _task_name(task_id, group), num_classes, num_examples, group)
    return spec, examples, prototypes, sources


def generate(cfg: GenConfig) -> MultiTaskDataset:
    """Build the full dataset, 80-20 split included. Deterministic per seed."""
    pool, proj, proj_bias = _global_streams(cfg)
    tasks, train, prototypes, sources = [], {}, {}, {}
    for t in range(cfg.num_tasks):
        spec, examples, protos, srcs = _generate_task(cfg, t, pool, proj, proj_bias)
        tasks.append(spec)
        train[t] = examples
        prototypes[str(t)] = protos.tolist()
        sources[str(t)] = srcs
    generation = {
        "config": asdict(cfg),
        "pool": pool.tolist(),
        "prototypes": prototypes,
        "sources": sources,
    }
    unsplit = MultiTaskDataset(tasks, train, {t: [] for t in train}, cfg.vocab_size,
                               cfg.d_img, generation)
    return split(unsplit, fraction=0.2, seed=cfg.seed)


def split(dataset: MultiTaskDataset, fraction: float = 0.2, seed=0) -> MultiTaskDataset:
    """Fresh per-task shuffled split; test size = round(fraction * N_T).

    Existing splits are pooled back together (train then test, original
    order) before re-assignment, so re-splitting is well defined.
    """
    if not (0.0 <= fraction < 1.0):
        raise ConfigurationError("split fraction must lie in [0,1)")
    rng = np.random.default_rng([seed, _STREAM_SPLIT])
    train, test = {}, {}
    for t in dataset.tasks:
        pooled = dataset.train[t.task_id] + dataset.test[t.task_id]
        n = len(pooled)
        if n < 2:
            raise DataError(f"task {t.task_id} has {n} examples; need >= 2 to split")
        n_test = round_half_up(fraction * n)
        perm = rng.permutation(n)
        test_idx = set(perm[:n_test].tolist())
        test[t.task_id] = [pooled[i] for i in range(n) if i in test_idx]
        train[t.task_id] = [pooled[i] for i in range(n) if i not in test_idx]
    return MultiTaskDataset(dataset.tasks, train, test, dataset.vocab_size,
                            dataset.d_img, dataset.generation)


def add_oversized_task(dataset: MultiTaskDataset, scale_factor: float) -> MultiTaskDataset:
    """Append one task with N_T = scale_factor * max existing N_T.

    Datasets from our generator share their prototype pool with the new
    task. An ingested dataset without a generation block gets a fresh
    default generator config matching its vocab and d_img instead.
    """
    if scale_factor < 1:
        raise ConfigurationError("scale_factor must be >= 1")
    if dataset.generation is not None:
        cfg = GenConfig(**dataset.generation["config"])
        pool = np.array(dataset.generation["pool"])
        _, proj, proj_bias = _global_streams(cfg)
    else:
        hi = max(2, min(GenConfig.class_hi, dataset.vocab_size))
        cfg = GenConfig(vocab_size=dataset.vocab_size, d_img=dataset.d_img,
                        class_lo=min(GenConfig.class_lo, hi), class_hi=hi)
        pool, proj, proj_bias = _global_streams(cfg)

    new_id = max(t.task_id for t in dataset.tasks) + 1
    target = round_half_up(scale_factor * max(t.num_examples for t in dataset.tasks))
    spec, examples, protos, srcs = _generate_task(
        cfg, new_id, pool, proj, proj_bias, force_examples=target
    )

    rng = np.random.default_rng([cfg.seed, _STREAM_LATE_SPLIT, new_id])
    n_test = round_half_up(0.2 * target)
    perm = rng.permutation(target)
    test_idx = set(perm[:n_test].tolist())

    train = dict(dataset.train)
    test = dict(dataset.test)
    train[new_id] = [examples[i] for i in range(target) if i not in test_idx]
    test[new_id] = [examples[i] for i in range(target) if i in test_idx]

    generation = None
    if dataset.generation is not None:
        generation = json.loads(json.dumps(dataset.generation))  # deep copy
        generation["prototypes"][str(new_id)] = protos.tolist()
        generation["sources"][str(new_id)] = srcs
    return MultiTaskDataset(dataset.tasks + [spec], train, test,
                            dataset.vocab_size, dataset.d_img, generation)


# ---------------------------------------------------------------------------
# export / ingest
# ---------------------------------------------------------------------------


def export(dataset: MultiTaskDataset, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "vocab_size": dataset.vocab_size,
        "d_img": dataset.d_img,
        "tasks": [asdict(t) for t in dataset.tasks],
    }
    if dataset.generation is not None:
        manifest["generation"] = dataset.generation
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    with open(os.path.join(path, EXAMPLES_NAME), "w", encoding="utf-8") as f:
        for t in dataset.tasks:
            by_split = {"test": dataset.test[t.task_id], "train": dataset.train[t.task_id]}
            for split_name in sorted(by_split):  # "test" < "train"
                for e in by_split[split_name]:
                    rec = {
                        "task_id": e.task_id,
                        "split": split_name,
                        "label": e.label,
                        "text_tokens": list(e.text_tokens),
                        "image_embeddings": e.image_embeddings.tolist(),
                    }
                    f.write(json.dumps(rec, separators=(",", ":")))
                    f.write("\n")


def _manifest_error(msg):
    return IngestionError(f"{MANIFEST_NAME}: {msg}")


def _load_manifest(path):
    try:
        with open(os.path.join(path, MANIFEST_NAME), encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise _manifest_error("missing") from None
    except json.JSONDecodeError as exc:
        raise _manifest_error(f"not valid JSON ({exc})") from None
    for key in ("version", "vocab_size", "d_img", "tasks"):
        if key not in manifest:
            raise _manifest_error(f"missing key {key!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise _manifest_error(f"unsupported version {manifest['version']!r}")
    if not manifest["tasks"]:
        raise _manifest_error("lists no tasks")
    tasks = []
    for entry in manifest["tasks"]:
        try:
            tasks.append(TaskSpec(**entry))
        except TypeError:
            raise _manifest_error(f"bad task entry {entry!r}") from None
    ids = sorted(t.task_id for t in tasks)
    if ids != list(range(len(tasks))):
        raise _manifest_error("task ids must be unique and dense from 0")
    for t in tasks:
        if t.num_classes < 2:
            raise _manifest_error(f"task {t.task_id} has num_classes < 2")
        if t.num_examples < t.num_classes:
            raise _manifest_error(f"task {t.task_id} has fewer examples than classes")
    return manifest, tasks


def ingest(path: str) -> MultiTaskDataset:
    """Load and fully validate an exported dataset directory.

    Rejects malformed records with the offending examples.jsonl line
    number. The canonical line order and the 80-20 split invariant are both
    enforced.
    """
    manifest, tasks = _load_manifest(path)
    vocab, d_img = manifest["vocab_size"], manifest["d_img"]
    by_id = {t.task_id: t for t in tasks}
    train = {t.task_id: [] for t in tasks}
    test = {t.task_id: [] for t in tasks}
    last_key = None
    with open(os.path.join(path, EXAMPLES_NAME), encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                raise IngestionError("blank line", line=lineno)
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"not valid JSON ({exc})", line=lineno) from None
            try:
                tid = rec["task_id"]
                split_name = rec["split"]
                label = rec["label"]
                tokens = rec["text_tokens"]
                imgs = rec["image_embeddings"]
            except (KeyError, TypeError):
                raise IngestionError("record missing required fields", line=lineno) from None
            if tid not in by_id:
                raise IngestionError(f"unknown task_id {tid}", line=lineno)
            if split_name not in ("train", "test"):
                raise IngestionError(f"bad split {split_name!r}", line=lineno)
            key = (tid, split_name)
            if last_key is not None and key < last_key:
                raise IngestionError("line out of canonical order", line=lineno)
            last_key = key
            spec = by_id[tid]
            if not isinstance(label, int) or not (0 <= label < spec.num_classes):
                raise IngestionError(
                    f"label {label!r} outside [0, {spec.num_classes})", line=lineno
                )
            if not all(isinstance(tok, int) and 0 <= tok < vocab for tok in tokens):
                raise IngestionError("token id outside vocabulary", line=lineno)
            arr = np.asarray(imgs, dtype=np.float64)
            if arr.size == 0:
                arr = arr.reshape(0, d_img)
            if arr.ndim != 2 or arr.shape[1] != d_img:
                raise IngestionError(
                    f"image embedding width != {d_img}", line=lineno
                )
            store = train if split_name == "train" else test
            store[tid].append(Example(tid, label, list(tokens), arr))
    for t in tasks:
        total = len(train[t.task_id]) + len(test[t.task_id])
        if total != t.num_examples:
            raise _manifest_error(
                f"task {t.task_id} declares {t.num_examples} examples, found {total}"
            )
        want_test = round_half_up(0.2 * t.num_examples)
        if len(test[t.task_id]) != want_test:
            raise _manifest_error(
                f"task {t.task_id} test split is {len(test[t.task_id])}, "
                f"expected {want_test} (80-20)"
            )
    return MultiTaskDataset(tasks, train, test, vocab, d_img,
                            manifest.get("generation"))
