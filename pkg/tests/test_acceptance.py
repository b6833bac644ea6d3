"""Acceptance gate: the eleven headline behaviors, one test each.

Each test prints exactly one ACCEPTANCE line so the suite's verdict can
be read off the log. Criteria 1-5 and 11 are exact property suites;
criteria 6-10 are directional training comparisons on a generated
20-task benchmark at desk scale and share their expensive runs through
module-scoped fixtures.
"""

import json
import math
import time

import numpy as np
import pytest

from oracles import max_relative_grad_error, quartile_by_sorting
from taskmix import nd
from taskmix.backbone import BackboneConfig, MultiTaskModel
from taskmix.data import GenConfig, MultiTaskDataset, export, generate, ingest
from taskmix.dypa import DypaConfig, allocate, score_tasks
from taskmix.evaluation import cohort_names
from taskmix.heads import HeadConfig, build_head, live_param_count, param_count
from taskmix.sampling import (
    SCHEDULE_KINDS,
    AlphaSchedule,
    SamplingPolicy,
    alpha_at,
    task_distribution,
)
from taskmix.training import (
    LrPolicy,
    TrainSettings,
    finetune,
    load_checkpoint,
    make_run,
    save_checkpoint,
    train,
    train_baseline,
)

# ---------------------------------------------------------------------------
# benchmark recipe: every directional criterion (6-10) runs on this
# ---------------------------------------------------------------------------

BENCH_BACKBONE = BackboneConfig(layers=2, hidden=64, attn_heads=4, ff=128,
                                vocab=512, max_len=32, d_img=16, max_images=2)
BENCH_SEEDS = (0, 1, 2)
BENCH_EPOCHS = 6
HELD_OUT_TASK = 20  # trained-on tasks are 0..19


def bench_gen_config():
    # 21 tasks: 20 trained jointly plus one correlated held-out task. Sizes
    # spread ~19..250 training examples so the smallest tasks genuinely
    # cannot be learned alone, and the epoch budget keeps the largest tasks
    # under-served when every task is drawn equally often.
    return GenConfig(num_tasks=21, d_z=16, vocab_size=512, d_img=16, rho=0.7,
                     prototype_jitter=0.15, pool_size=32, size_median=60.0,
                     size_sigma=1.4, min_examples=24, class_lo=4, class_hi=12,
                     label_noise=0.05, latent_noise=0.35, tokens_per_example=12,
                     images_lo=0, images_hi=2, image_noise=0.1, seed=0)


def recipe_settings(seed, dypa=True, schedule="exponential", k=1,
                    epochs=BENCH_EPOCHS, d_t=8):
    # fixed-width arms keep d_t at 1/8 of the backbone width, the same
    # proportion as the reference fixed head; the quartile ladder then has
    # real headroom above it
    if schedule in ("uniform", "datasize"):
        sched = AlphaSchedule(kind="constant",
                              alpha_start=0.0 if schedule == "uniform" else 1.0)
    else:
        sched = AlphaSchedule(kind=schedule)
    return TrainSettings(
        backbone=BENCH_BACKBONE,
        head_kind="attention", d_t=d_t, attn_heads=2,
        dypa=DypaConfig(base_dt=8, growth=2, attn_heads=2,
                        source="class_count") if dypa else None,
        schedule=sched,
        repetition_k=k,
        lr_policy=LrPolicy(kind="warmup_step", lr_low=1e-4, lr_high=1e-3),
        batch_size=8, epochs=epochs, eval_points=5, seed=seed,
    )


def _verdict(criterion: int, ok: bool, detail: str):
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# 1. sampling correctness
# ---------------------------------------------------------------------------


def test_criterion_01_sampling_frequencies():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    sizes = np.exp(rng.normal(np.log(500), 1.0, size=100)).astype(np.int64) + 1
    draws = 1_000_000
    worst = 0.0
    for alpha in (0.0, 0.5, 1.0):
        policy = SamplingPolicy(AlphaSchedule(kind="constant", alpha_start=alpha),
                                seed=[7, int(alpha * 10)])
        seq = policy.sample_sequence(sizes, draws)
        freq = np.bincount(seq, minlength=len(sizes)) / draws
        expect = task_distribution(sizes, alpha)
        worst = max(worst, float(np.abs(freq - expect).sum()))
    elapsed = time.perf_counter() - t0
    _verdict(1, worst < 0.01 and elapsed < 10.0,
             f"worst L1 {worst:.5f} over 1e6 draws, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. schedule exactness
# ---------------------------------------------------------------------------


def test_criterion_02_schedule_endpoints_and_monotonicity():
    grid = np.linspace(0.0, 1.0, 10_000)
    worst_end = 0.0
    worst_rise = 0.0
    for kind in SCHEDULE_KINDS:
        sched = (AlphaSchedule(kind="constant", alpha_start=0.5)
                 if kind == "constant" else AlphaSchedule(kind=kind))
        worst_end = max(worst_end,
                        abs(alpha_at(sched, 0.0) - sched.alpha_start),
                        abs(alpha_at(sched, 1.0) - sched.alpha_end))
        curve = np.array([alpha_at(sched, p) for p in grid])
        worst_rise = max(worst_rise, float(np.diff(curve).max(initial=-1.0)))
    ok = worst_end <= 1e-12 and worst_rise <= 1e-12
    _verdict(2, ok, f"endpoint err {worst_end:.2e}, max rise {worst_rise:.2e} "
                    f"across {len(SCHEDULE_KINDS)} kinds")


# ---------------------------------------------------------------------------
# 3. gradient fidelity
# ---------------------------------------------------------------------------


def _scalarize(t):
    # weighted reduction: asymmetric weights catch gradients a plain sum
    # would let cancel
    flat = nd.reshape(t, (1, t.data.size))
    w = nd.Tensor(np.linspace(0.5, 1.5, t.data.size)[:, None])
    return nd.sum_axis(nd.matmul(flat, w), 0)


def _op_cases(rng):
    """(name, build_loss, tensors) for every differentiable op."""
    def t(*shape, scale=1.0):
        return nd.Tensor(rng.normal(0, scale, size=shape), requires_grad=True)

    cases = []
    a, b = t(3, 4), t(3, 4)
    cases.append(("add", lambda: _scalarize(nd.relu(nd.add(a, b))), [a, b]))
    m1, m2 = t(3, 4), t(4, 2)
    cases.append(("matmul", lambda: _scalarize(nd.matmul(m1, m2)), [m1, m2]))
    r = t(2, 6)
    cases.append(("reshape+scale",
                  lambda: _scalarize(nd.scale(nd.reshape(r, (3, 4)), 1.7)), [r]))
    tr = t(3, 5)
    cases.append(("transpose",
                  lambda: _scalarize(nd.relu(nd.transpose(tr, (1, 0)))), [tr]))
    table = t(7, 4)
    ids = np.array([[0, 3, 6], [2, 2, 5]])
    cases.append(("embedding",
                  lambda: _scalarize(nd.relu(nd.embedding(table, ids))), [table]))
    sm = t(4, 5)
    mask = np.zeros((4, 5)); mask[:, 4] = 1.0
    w = t(5, 3)
    cases.append(("softmax",
                  lambda: _scalarize(nd.matmul(nd.softmax(sm, additive_mask=mask * nd.MASK_NEG), w)),
                  [sm, w]))
    ln_x, ln_g, ln_b = t(4, 6), t(6), t(6)
    cases.append(("layer_norm",
                  lambda: _scalarize(nd.layer_norm(ln_x, ln_g, ln_b)),
                  [ln_x, ln_g, ln_b]))
    xe = t(5, 4)
    labels = np.array([0, 1, 3, 2, 1])
    cases.append(("softmax_xent", lambda: nd.softmax_xent(xe, labels), [xe]))
    d = 6
    ap = nd.AttentionParams(
        wq=t(d, d), bq=t(d), wk=t(d, d), bk=t(d),
        wv=t(d, d), bv=t(d), wo=t(d, d), bo=t(d),
        num_heads=2,
    )
    ax = t(3, d, scale=0.5)
    kmask = np.array([[1.0, 1.0, 0.0]])
    cases.append(("attention",
                  lambda: _scalarize(nd.self_attention(ax, ap, key_mask=kmask)),
                  [ax] + list(ap.tensors())))
    return cases


def test_criterion_03_gradient_fidelity():
    rng = np.random.default_rng(23)
    worst = 0.0
    worst_name = ""
    for name, build, tensors in _op_cases(rng):
        err = max_relative_grad_error(build, tensors, rng, samples_per_tensor=10)
        if err > worst:
            worst, worst_name = err, name

    # whole model: 2 encoder layers at width 16, mixed text+image batch
    cfg = BackboneConfig(layers=2, hidden=16, attn_heads=2, ff=32, vocab=32,
                         max_len=16, d_img=4, max_images=2)
    data = generate(GenConfig(num_tasks=2, d_z=4, vocab_size=32, d_img=4,
                              size_median=16.0, min_examples=12, class_lo=3,
                              class_hi=4, tokens_per_example=5, pool_size=8,
                              images_lo=1, images_hi=2, label_noise=0.0,
                              seed=3))
    alloc = {0: HeadConfig("attention", 16, data.tasks[0].num_classes,
                           d_t=8, attn_heads=2),
             1: HeadConfig("fc", 16, data.tasks[1].num_classes)}
    model = MultiTaskModel(cfg, alloc, seed=5)
    batch = data.train[0][:4]
    tensors = [p.tensor for p in model.parameters()]
    err = max_relative_grad_error(lambda: model.loss(batch, 0), tensors, rng,
                                  samples_per_tensor=4)
    if err > worst:
        worst, worst_name = err, "full model"
    _verdict(3, worst < 1e-5, f"worst rel err {worst:.2e} at {worst_name}")


# ---------------------------------------------------------------------------
# 4. parameter accounting
# ---------------------------------------------------------------------------


def test_criterion_04_head_parameter_ratio_and_live_counts():
    worst_ratio = math.inf
    for c in range(5, 101):
        fc = param_count(HeadConfig("fc", 768, c))
        attn = param_count(HeadConfig("attention", 768, c, d_t=64, attn_heads=2))
        worst_ratio = min(worst_ratio, fc / attn)

    live_ok = True
    rng = np.random.default_rng(0)
    probes = [HeadConfig("fc", 768, 10),
              HeadConfig("attention", 768, 10, d_t=64, attn_heads=2),
              HeadConfig("fc", 64, 7),
              HeadConfig("attention", 64, 33, d_t=8, attn_heads=2)]
    for hc in probes:
        head = build_head(hc, rng, prefix="probe")
        live_ok = live_ok and live_param_count(head) == param_count(hc)
    _verdict(4, worst_ratio >= 8.0 and live_ok,
             f"min fc/attention ratio {worst_ratio:.2f} over C in [5,100], "
             f"live counts {'exact' if live_ok else 'WRONG'}")


# ---------------------------------------------------------------------------
# 5. DyPA structure
# ---------------------------------------------------------------------------


def test_criterion_05_dypa_binning_and_ladders():
    from taskmix.data import TaskSpec
    rng = np.random.default_rng(31)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(4, 40))
        counts = np.exp(rng.normal(4, 1.2, size=k)).astype(np.int64) + 2
        tasks = [TaskSpec(i, f"t{i}", 5, int(c), i) for i, c in enumerate(counts)]
        scores = score_tasks(tasks, "example_count")
        got = [s.quartile - 1 for s in scores]  # quartiles are 1-based
        want = quartile_by_sorting(counts)
        if got != list(want):
            mismatches += 1
        # quartiles are rank statistics: any strictly monotone transform
        # of the counts must give the same bins
        trans = [TaskSpec(i, f"t{i}", 5, int(c) * 1000 + 7, i)
                 for i, c in enumerate(counts)]
        if [s.quartile - 1 for s in score_tasks(trans, "example_count")] != got:
            mismatches += 1

    def ladder(base):
        tasks = [TaskSpec(i, f"t{i}", 5, 10 * (i + 1), i) for i in range(8)]
        cfgs = allocate(tasks, score_tasks(tasks, "example_count"),
                        DypaConfig(base_dt=base, growth=2, attn_heads=2),
                        d_backbone=base * 8)
        return sorted({c.d_t for c in cfgs.values()})

    paper = ladder(128)
    desk = ladder(8)
    ladders_ok = paper == [128, 256, 512, 1024] and desk == [8, 16, 32, 64]
    _verdict(5, mismatches == 0 and ladders_ok,
             f"{mismatches} oracle mismatches in 1000 vectors; "
             f"ladders {paper} and {desk}")


# ---------------------------------------------------------------------------
# shared benchmark fixtures for criteria 6-10
# ---------------------------------------------------------------------------

_timings = {}


@pytest.fixture(scope="module")
def benchmark():
    full = generate(bench_gen_config())
    bench = full.subset_view(range(HELD_OUT_TASK))
    sizes = bench.train_sizes()
    entries = [(t.name, int(sizes[t.task_id]), t.task_id) for t in bench.tasks]
    _, b10 = cohort_names(entries, math.ceil(0.1 * bench.num_tasks))
    by_name = {t.name: int(sizes[t.task_id]) for t in bench.tasks}
    # the low-resource cohort really is low-resource
    assert all(by_name[nm] <= 100 for nm in b10), (b10, by_name)
    # held-out task kept low-data: 24 training examples, the rest join its
    # test split so the transfer comparison is measured on ~90 examples
    train = dict(full.train)
    test = dict(full.test)
    train[HELD_OUT_TASK] = full.train[HELD_OUT_TASK][:24]
    test[HELD_OUT_TASK] = full.train[HELD_OUT_TASK][24:] + full.test[HELD_OUT_TASK]
    transfer = MultiTaskDataset(full.tasks, train, test,
                                full.vocab_size, full.d_img)
    return {"full": full, "bench": bench, "b10": b10, "transfer": transfer}


@pytest.fixture(scope="module")
def mtl_runs(benchmark, tmp_path_factory):
    """Final-recipe joint runs, one per seed; checkpoints kept for reuse."""
    root = tmp_path_factory.mktemp("mtl")
    t0 = time.perf_counter()
    runs = {}
    for seed in BENCH_SEEDS:
        runs[seed] = train(make_run(benchmark["bench"], recipe_settings(seed),
                                    out_dir=str(root / f"seed{seed}")))
    _timings["mtl"] = time.perf_counter() - t0
    return runs


@pytest.fixture(scope="module")
def baseline_accs(benchmark):
    """Per-task single-task accuracy, {seed: {task name: accuracy}}."""
    bench = benchmark["bench"]
    t0 = time.perf_counter()
    out = {}
    for seed in BENCH_SEEDS:
        accs = {}
        for t in bench.tasks:
            res = train_baseline(bench, t.task_id,
                                 recipe_settings(seed, dypa=False))
            accs[t.name] = res.report.mean_acc
        out[seed] = accs
    _timings["baselines"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------------------
# 6. joint training lifts low-resource tasks
# ---------------------------------------------------------------------------


def test_criterion_06_mtl_beats_baselines_on_b10(benchmark, mtl_runs,
                                                 baseline_accs):
    b10 = benchmark["b10"]
    margins = []
    for seed in BENCH_SEEDS:
        mtl_b10 = np.mean([mtl_runs[seed].report.per_task[nm]["accuracy"]
                           for nm in b10])
        base_b10 = np.mean([baseline_accs[seed][nm] for nm in b10])
        margins.append(mtl_b10 - base_b10)
    margin = float(np.mean(margins))
    elapsed = _timings["mtl"] + _timings["baselines"]
    _verdict(6, margin >= 0.05 and elapsed < 600.0,
             f"b10 margin {margin * 100:+.1f} pts over {len(BENCH_SEEDS)} seeds "
             f"(need >= +5.0), runtime {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. alpha decay vs uniform sampling
# ---------------------------------------------------------------------------


def test_criterion_07_exponential_decay_beats_uniform(benchmark):
    # schedule comparison in isolation: fixed-width heads on both arms
    margins = []
    for seed in BENCH_SEEDS:
        exp = train(make_run(benchmark["bench"],
                             recipe_settings(seed, dypa=False)))
        uni = train(make_run(benchmark["bench"],
                             recipe_settings(seed, dypa=False,
                                             schedule="uniform")))
        margins.append(exp.report.mean_acc - uni.report.mean_acc)
    margin = float(np.mean(margins))
    _verdict(7, margin >= 0.0,
             f"exponential - uniform mean accuracy {margin * 100:+.1f} pts "
             f"over {len(BENCH_SEEDS)} seeds")


# ---------------------------------------------------------------------------
# 8. recipe ablation grid
# ---------------------------------------------------------------------------


def test_criterion_08_full_recipe_wins_ablation_grid():
    wins = 0
    cells = []
    for num_tasks in (10, 25):
        gen = bench_gen_config()
        gen.num_tasks = num_tasks
        data = generate(gen)
        for seed in (0, 1):
            arms = {
                "vanilla": recipe_settings(seed, dypa=False,
                                           schedule="datasize"),
                "decay": recipe_settings(seed, dypa=False),
                "full": recipe_settings(seed),
            }
            accs = {}
            for arm, settings in arms.items():
                res = train(make_run(data, settings))
                accs[arm] = res.report.mean_acc if res.report else 0.0
            best = max(accs, key=accs.get)
            wins += best == "full"
            cells.append(f"{num_tasks}t/s{seed}:{best}")
    _verdict(8, wins >= 3, f"full recipe best in {wins}/4 cells ({', '.join(cells)})")


# ---------------------------------------------------------------------------
# 9. consecutive repetition harm
# ---------------------------------------------------------------------------


def test_criterion_09_repetition_k10_hurts(benchmark, mtl_runs):
    harmed = 0
    details = []
    for seed in BENCH_SEEDS:
        k10 = train(make_run(benchmark["bench"], recipe_settings(seed, k=10)))
        if k10.status == "diverged" or (
                k10.report.mean_acc < mtl_runs[seed].report.mean_acc):
            harmed += 1
        got = "div" if k10.report is None else f"{k10.report.mean_acc:.3f}"
        details.append(f"s{seed} k10 {got} vs k1 "
                       f"{mtl_runs[seed].report.mean_acc:.3f}")
    _verdict(9, harmed == len(BENCH_SEEDS),
             f"k=10 worse in {harmed}/{len(BENCH_SEEDS)} seeds ({'; '.join(details)})")


# ---------------------------------------------------------------------------
# 10. transfer to a correlated held-out task
# ---------------------------------------------------------------------------


def test_criterion_10_finetune_beats_random_init(benchmark, mtl_runs):
    transfer = benchmark["transfer"]
    margins = []
    for seed in BENCH_SEEDS:
        ft = recipe_settings(seed, dypa=False, d_t=16)
        warm = finetune(transfer, HELD_OUT_TASK, ft,
                        checkpoint_path=mtl_runs[seed].checkpoint_path,
                        epochs=4)
        cold = finetune(transfer, HELD_OUT_TASK, ft,
                        checkpoint_path=None, epochs=4)
        margins.append(warm.report.mean_acc - cold.report.mean_acc)
    margin = float(np.mean(margins))
    _verdict(10, margin > 0.0,
             f"warm - cold accuracy {margin * 100:+.1f} pts on held-out task "
             f"over {len(BENCH_SEEDS)} seeds")


# ---------------------------------------------------------------------------
# 11. determinism and persistence
# ---------------------------------------------------------------------------


def test_criterion_11_determinism_and_round_trips(tmp_path):
    data = generate(GenConfig(num_tasks=3, d_z=4, vocab_size=32, d_img=4,
                              size_median=24.0, min_examples=16, class_lo=3,
                              class_hi=4, tokens_per_example=5, pool_size=8,
                              images_hi=1, seed=2))
    settings = TrainSettings(
        backbone=BackboneConfig(layers=1, hidden=16, attn_heads=2, ff=32,
                                vocab=32, max_len=16, d_img=4),
        head_kind="attention", d_t=8, attn_heads=2, dypa=None,
        schedule=AlphaSchedule(kind="exponential"),
        lr_policy=LrPolicy(kind="fixed", lr_low=1e-3),
        batch_size=8, epochs=2, eval_points=3, seed=0,
    )
    logs = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        train(make_run(data, settings, out_dir=str(out)))
        logs.append((out / "metrics.jsonl").read_bytes())
    logs_ok = logs[0] == logs[1]

    model, _ = load_checkpoint(str(tmp_path / "run0" / "model.npz"))
    save_checkpoint(model, str(tmp_path / "resaved.npz"))
    again, _ = load_checkpoint(str(tmp_path / "resaved.npz"))
    batch = data.test[0][:4]
    drift = float(np.abs(model.logits(batch, 0).data
                         - again.logits(batch, 0).data).max())

    export(data, str(tmp_path / "ds"))
    round_ok = ingest(str(tmp_path / "ds")) == data
    _verdict(11, logs_ok and drift <= 1e-12 and round_ok,
             f"logs identical {logs_ok}, checkpoint drift {drift:.1e}, "
             f"dataset round-trip {round_ok}")
