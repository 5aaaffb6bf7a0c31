"""Experiment suite: shadow-construction ablation, missing-class transfer,
overfitting sweep, and shadow-architecture comparison.

Each experiment runs the full pipeline (train target, build shadow against the
target oracle, assemble attack sets, train per-class attack models, evaluate
on the target's true members) across explicit seeds. Heavy runs fan out over
a process pool; results are deterministic regardless of worker count because
every task derives its own seeds.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from . import attack, models, nncore
from .attack import AttackReport
from .data import Dataset, SplitIndices, remove_class
from .losses import DistillConfig
from .models import TrainHistory, as_oracle
from .nncore import SgdConfig

ARMS = ("label", "softmax", "mi")


def child_seed(base: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(base), int(tag)]).generate_state(1)[0])


def default_workers() -> int:
    env = os.environ.get("LLEAKS_WORKERS")
    if env:
        return max(1, int(env))
    return 1


@dataclass(frozen=True)
class PipelineSettings:
    """Everything the attack pipeline needs besides data, splits, and seeds."""

    target_arch: str = "lenet5"
    shadow_arch: str = "shadow-nn"
    distill: DistillConfig = DistillConfig(temperature=4.0, alpha=0.9, beta=0.1)
    target_sgd: SgdConfig = SgdConfig(0.05, 0.9, 64, 30, 0)
    shadow_sgd: SgdConfig = SgdConfig(0.05, 0.9, 64, 30, 0)
    attack_sgd: SgdConfig = SgdConfig(0.1, 0.9, 32, 30, 0)
    eval_cap: int = 2500        # per-side cap for the balanced evaluation sets
    history_cap: int | None = 2000
    workers: int = field(default_factory=default_workers)


@dataclass
class ArmResult:
    arm: str
    seed: int
    report: AttackReport
    shadow: object
    shadow_history: TrainHistory
    shadow_train_acc: float
    shadow_test_acc: float
    oracle_queries: int

    @property
    def f1(self) -> float:
        return self.report.f1


@dataclass
class SeedRun:
    seed: int
    target: object
    target_history: TrainHistory
    target_train_acc: float
    target_test_acc: float
    arms: dict[str, ArmResult] = field(default_factory=dict)

    @property
    def target_overfit(self) -> float:
        return self.target_train_acc - self.target_test_acc


@dataclass
class AblationResult:
    runs: list[SeedRun]
    arms: tuple[str, ...]

    def f1s(self, arm: str) -> list[float]:
        return [run.arms[arm].f1 for run in self.runs]

    def summary(self) -> dict[str, dict]:
        out = {}
        for arm in self.arms:
            vals = np.array(self.f1s(arm))
            out[arm] = {
                "mean_f1": float(vals.mean()),
                "std_f1": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                "f1": [float(v) for v in vals],
            }
        return out

    def rows(self) -> list[dict]:
        rows = []
        for run in self.runs:
            for arm in self.arms:
                r = run.arms[arm]
                rows.append({
                    "arm": arm, "seed": run.seed,
                    "f1": r.report.f1, "ap": r.report.ap, "ar": r.report.ar,
                    "target_test_acc": run.target_test_acc,
                    "target_overfit": run.target_overfit,
                    "shadow_test_acc": r.shadow_test_acc,
                })
        return rows


def shadow_out_pool(splits: SplitIndices) -> np.ndarray:
    """First half of the test split: non-members for the attack training set."""
    return splits.test[: len(splits.test) // 2]


def eval_nonmember_pool(splits: SplitIndices) -> np.ndarray:
    """Second half of the test split: non-members reserved for evaluation."""
    return splits.test[len(splits.test) // 2:]


def balanced_eval_sets(
    splits: SplitIndices, seed: int, cap: int
) -> tuple[np.ndarray, np.ndarray]:
    """Equal-sized member/non-member evaluation sets, disjoint from A_train."""
    non_pool = eval_nonmember_pool(splits)
    member_pool = splits.target_train
    k = min(len(non_pool), len(member_pool), cap)
    rng = np.random.default_rng(seed)
    members = rng.choice(member_pool, size=k, replace=False)
    nonmembers = rng.choice(non_pool, size=k, replace=False)
    return members, nonmembers


def train_target(
    ds: Dataset, splits: SplitIndices, settings: PipelineSettings, seed: int
) -> SeedRun:
    sgd = replace(settings.target_sgd, seed=child_seed(seed, 1))
    net = models.build_arch(settings.target_arch, ds.input_shape, ds.num_classes, sgd.seed)
    net, hist = models.train_classifier(
        net, ds, splits.target_train, splits.test, sgd, history_cap=settings.history_cap
    )
    return SeedRun(
        seed=seed,
        target=net,
        target_history=hist,
        target_train_acc=models.accuracy(net, ds, splits.target_train),
        target_test_acc=models.accuracy(net, ds, splits.test),
    )


def run_attack_arm(
    target: object,
    ds: Dataset,
    splits: SplitIndices,
    arm: str,
    settings: PipelineSettings,
    seed: int,
    shadow_arch: str | None = None,
    shadow_idx: np.ndarray | None = None,
) -> ArmResult:
    """One pipeline arm: build a shadow a given way, attack, evaluate.

    label: shadow trained on ground-truth labels only (no oracle contact).
    softmax: logit distillation at temperature 1.
    mi: logit distillation at the configured temperature.
    """
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
    arch = shadow_arch or settings.shadow_arch
    shadow_idx = splits.shadow_train if shadow_idx is None else shadow_idx
    sgd = replace(settings.shadow_sgd, seed=child_seed(seed, 2))
    oracle = as_oracle(target)

    if arm == "label":
        shadow = models.build_arch(arch, ds.input_shape, ds.num_classes, sgd.seed)
        shadow, hist = models.train_classifier(
            shadow, ds, shadow_idx, splits.test, sgd, history_cap=settings.history_cap
        )
        queries = 0
    else:
        cfg = settings.distill if arm == "mi" else replace(settings.distill, temperature=1.0)
        shadow, hist = attack.distill_shadow(
            oracle, arch, ds, shadow_idx, cfg, sgd,
            eval_idx=splits.test, history_cap=settings.history_cap,
        )
        queries = oracle.query_count

    aset = attack.build_attack_set(
        shadow, ds, shadow_idx, shadow_out_pool(splits), balance_seed=child_seed(seed, 4)
    )
    attack_sgd = replace(settings.attack_sgd, seed=child_seed(seed, 3))
    attack_model = attack.train_attack_models(aset, attack_sgd)
    members, nonmembers = balanced_eval_sets(splits, child_seed(seed, 5), settings.eval_cap)
    report = attack.evaluate_attack(attack_model, oracle, ds, members, nonmembers)
    report.metadata.update({"arm": arm, "seed": seed, "shadow_arch": arch,
                            "distill_queries": queries})
    return ArmResult(
        arm=arm,
        seed=seed,
        report=report,
        shadow=shadow,
        shadow_history=hist,
        shadow_train_acc=models.accuracy(shadow, ds, shadow_idx),
        shadow_test_acc=models.accuracy(shadow, ds, splits.test),
        oracle_queries=queries,
    )


# ---------------------------------------------------------------------------
# Process-pool plumbing: workers inherit the dataset via an initializer so
# each task only ships seeds and a (small) target network.
# ---------------------------------------------------------------------------

_CTX: dict = {}


def _init_worker(ds, splits, settings):
    _CTX["ds"] = ds
    _CTX["splits"] = splits
    _CTX["settings"] = settings


def _target_task(seed):
    with threadpool_limits(1):
        return train_target(_CTX["ds"], _CTX["splits"], _CTX["settings"], seed)


def _arm_task(args):
    target, arm, seed, shadow_arch, shadow_idx = args
    with threadpool_limits(1):
        return run_attack_arm(
            target, _CTX["ds"], _CTX["splits"], arm, _CTX["settings"], seed,
            shadow_arch=shadow_arch, shadow_idx=shadow_idx,
        )


def _run_parallel(ds, splits, settings, seeds, arm_specs):
    """Train one target per seed, then run arm_specs: (seed, arm, arch, idx)."""
    workers = max(1, settings.workers)
    if workers == 1:
        runs = {seed: train_target(ds, splits, settings, seed) for seed in seeds}
        results = [
            run_attack_arm(runs[seed].target, ds, splits, arm, settings, seed,
                           shadow_arch=arch, shadow_idx=idx)
            for seed, arm, arch, idx in arm_specs
        ]
        return runs, results
    with ProcessPoolExecutor(
        max_workers=workers, initializer=_init_worker, initargs=(ds, splits, settings)
    ) as pool:
        runs = dict(zip(seeds, pool.map(_target_task, seeds)))
        tasks = [(runs[seed].target, arm, seed, arch, idx)
                 for seed, arm, arch, idx in arm_specs]
        results = list(pool.map(_arm_task, tasks))
    return runs, results


def experiment_ablation(
    ds: Dataset,
    splits: SplitIndices,
    seeds: list[int],
    settings: PipelineSettings | None = None,
) -> AblationResult:
    """Compare label-trained, temperature-1, and temperature-T shadows by F1."""
    settings = settings or PipelineSettings()
    specs = [(seed, arm, None, None) for seed in seeds for arm in ARMS]
    runs, results = _run_parallel(ds, splits, settings, seeds, specs)
    for res in results:
        runs[res.seed].arms[res.arm] = res
    return AblationResult([runs[s] for s in seeds], ARMS)


@dataclass
class ArchitectureResult:
    per_arch: dict[str, list[ArmResult]]
    seeds: list[int]

    def mean_f1(self) -> dict[str, float]:
        return {a: float(np.mean([r.f1 for r in res])) for a, res in self.per_arch.items()}

    def rows(self) -> list[dict]:
        return [
            {"arch": arch, "seed": r.seed, "f1": r.f1, "ap": r.report.ap, "ar": r.report.ar}
            for arch, results in self.per_arch.items()
            for r in results
        ]


def experiment_architectures(
    ds: Dataset,
    splits: SplitIndices,
    arch_list: list[str],
    seeds: list[int],
    settings: PipelineSettings | None = None,
) -> ArchitectureResult:
    """Distill shadows of different architectures and compare attack F1."""
    settings = settings or PipelineSettings()
    specs = [(seed, "mi", arch, None) for seed in seeds for arch in arch_list]
    runs, results = _run_parallel(ds, splits, settings, seeds, specs)
    per_arch = {arch: [] for arch in arch_list}
    for (seed, _, arch, _), res in zip(specs, results):
        per_arch[arch].append(res)
    return ArchitectureResult(per_arch, list(seeds))


@dataclass
class MissingClassResult:
    class_id: int
    bias_shift: float
    distilled_acc: float
    distilled_acc_biased: float
    baseline_acc: float
    test_class_count: int

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "bias_shift": self.bias_shift,
            "removed_class_accuracy": {
                "distilled": self.distilled_acc,
                "distilled_with_bias": self.distilled_acc_biased,
                "label_baseline": self.baseline_acc,
            },
            "test_class_count": self.test_class_count,
        }


def class_accuracy_with_bias(
    net: object, ds: Dataset, idx: np.ndarray, class_id: int, bias: float
) -> float:
    """Accuracy on class_id samples after adding a constant to that class logit."""
    idx = np.asarray(idx)
    if len(idx) == 0:
        raise ValueError("no samples of the requested class in the index set")
    hits = 0
    for start in range(0, len(idx), 512):
        chunk = idx[start:start + 512]
        logits = nncore.forward(net, ds.features[chunk])
        logits[:, class_id] += bias
        hits += int((logits.argmax(axis=1) == ds.labels[chunk]).sum())
    return hits / len(idx)


def experiment_missing_class(
    ds: Dataset,
    splits: SplitIndices,
    class_id: int,
    settings: PipelineSettings | None = None,
    seed: int = 0,
    bias_shift: float = 4.0,
    target_run: SeedRun | None = None,
) -> MissingClassResult:
    """Remove one class from the shadow split; measure transfer of its knowledge.

    The distilled shadow never sees a sample of class_id yet inherits the
    class through the teacher's logits on the remaining samples; the
    label-trained baseline has no source for it at all. The bias variant adds
    a constant to the missing class's logit at prediction time.
    """
    settings = settings or PipelineSettings()
    run = target_run or train_target(ds, splits, settings, seed)
    filtered = remove_class(ds, splits.shadow_train, class_id)
    mi = run_attack_arm(run.target, ds, splits, "mi", settings, seed, shadow_idx=filtered)
    label = run_attack_arm(run.target, ds, splits, "label", settings, seed, shadow_idx=filtered)
    test_class = splits.test[ds.labels[splits.test] == class_id]
    return MissingClassResult(
        class_id=class_id,
        bias_shift=bias_shift,
        distilled_acc=class_accuracy_with_bias(mi.shadow, ds, test_class, class_id, 0.0),
        distilled_acc_biased=class_accuracy_with_bias(mi.shadow, ds, test_class, class_id, bias_shift),
        baseline_acc=class_accuracy_with_bias(label.shadow, ds, test_class, class_id, 0.0),
        test_class_count=len(test_class),
    )


@dataclass
class OverfitPoint:
    epochs: int
    target_overfit: float
    shadow_overfit: float
    f1: float


@dataclass
class OverfitSweepResult:
    points: list[OverfitPoint]

    def spearman(self) -> float:
        xs = [p.target_overfit for p in self.points]
        ys = [p.shadow_overfit for p in self.points]
        return float(stats.spearmanr(xs, ys).statistic)

    def rows(self) -> list[dict]:
        return [
            {"epochs": p.epochs, "target_overfit": p.target_overfit,
             "shadow_overfit": p.shadow_overfit, "f1": p.f1}
            for p in self.points
        ]


def _sweep_task(args):
    epochs, seed = args
    ds, splits, settings = _CTX["ds"], _CTX["splits"], _CTX["settings"]
    with threadpool_limits(1):
        return _sweep_point(ds, splits, settings, epochs, seed)


def _sweep_point(ds, splits, settings, epochs, seed):
    point_settings = replace(
        settings, target_sgd=replace(settings.target_sgd, epochs=epochs)
    )
    run = train_target(ds, splits, point_settings, seed)
    mi = run_attack_arm(run.target, ds, splits, "mi", point_settings, seed)
    # the shadow's overfitting is read against the *target's* members: how much
    # more accurate it is on records it never saw but its teacher memorized
    shadow_overfit = models.overfitting_level(
        mi.shadow, ds, splits.target_train, splits.test
    )
    return OverfitPoint(epochs, run.target_overfit, shadow_overfit, mi.f1)


def experiment_overfit_sweep(
    ds: Dataset,
    splits: SplitIndices,
    epoch_grid: list[int],
    settings: PipelineSettings | None = None,
    seed: int = 0,
) -> OverfitSweepResult:
    """Vary target training length; track target/shadow overfitting and F1."""
    settings = settings or PipelineSettings()
    grid = sorted(epoch_grid)
    if settings.workers > 1:
        with ProcessPoolExecutor(
            max_workers=settings.workers, initializer=_init_worker,
            initargs=(ds, splits, settings),
        ) as pool:
            points = list(pool.map(_sweep_task, [(e, seed) for e in grid]))
    else:
        points = [_sweep_point(ds, splits, settings, e, seed) for e in grid]
    return OverfitSweepResult(points)
