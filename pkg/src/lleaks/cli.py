"""Command-line front end: phase-by-phase pipeline plus the experiment suite.

Phases write their artifacts into one output directory guarded by a lock
file, and append to a manifest that records content hashes. Each phase checks
its prerequisites through the manifest, so a stale or missing artifact fails
fast with a distinct exit code:

    0  success
    1  usage or config error
    2  missing prerequisite artifact
    3  integrity failure (hash mismatch, corrupt manifest)
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

from . import attack, data, experiments, models
from .config import ConfigError, RunConfig, apply_seed_override, load_config
from .data import Dataset, SplitSpec
from .experiments import balanced_eval_sets, shadow_out_pool
from .manifest import (
    IntegrityError,
    MissingPrerequisiteError,
    load_manifest,
    record_phase,
    require_artifact,
    verify_manifest,
)
from .nncore import CheckpointError, load_network, save_network

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING = 2
EXIT_INTEGRITY = 3

EXPERIMENT_NAMES = ("ablation", "missing-class", "overfit-sweep", "architectures")


class OutputLock:
    """One command owns the output directory; concurrent runs are refused."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another run: {self.path} "
                "(remove the file if that run is dead)"
            )
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def build_dataset(cfg: RunConfig) -> Dataset:
    ds = cfg.dataset
    if ds.name == "mnist":
        return data.load_mnist_idx(ds.images_path, ds.labels_path)
    if ds.name == "synthetic-images":
        return data.gen_synthetic_images(
            ds.n or 60000, ds.num_classes or 10, ds.seed,
            noise=ds.noise, ambiguous_frac=ds.ambiguous_frac,
        )
    if ds.name in ("purchase-like", "texas-like"):
        preset = data.TABULAR_PRESETS[ds.name]
        return data.gen_synthetic_tabular(
            ds.n or preset["n"],
            ds.n_features or preset["n_features"],
            ds.num_classes or preset["num_classes"],
            ds.seed,
            flip_prob=ds.flip_prob,
        )
    if ds.name == "toy":
        return data.gen_toy_memorization(ds.n or 600, ds.num_classes or 3, ds.seed)
    raise ConfigError(f"unknown dataset name {ds.name!r}")


def _load_run_inputs(out_dir) -> tuple[Dataset, SplitIndices]:
    ds_path = require_artifact(out_dir, "prepare-data", "dataset")
    split_path = require_artifact(out_dir, "prepare-data", "splits")
    return data.load_dataset(ds_path), data.load_split(split_path)


def cmd_prepare_data(cfg: RunConfig, out_dir: Path) -> int:
    t0 = time.time()
    ds = build_dataset(cfg)
    spec = SplitSpec(*cfg.split_sizes, seed=cfg.split_seed)
    splits = data.split_disjoint(ds, spec)
    ds_path = out_dir / "dataset.bin"
    split_path = out_dir / "splits.bin"
    data.save_dataset(ds, ds_path)
    data.save_split(splits, split_path)
    record_phase(
        out_dir, "prepare-data", cfg.config_hash(),
        {"dataset": ds_path, "splits": split_path},
        info={
            "dataset": ds.name, "records": len(ds), "num_classes": ds.num_classes,
            "target_train": len(splits.target_train),
            "shadow_train": len(splits.shadow_train),
            "test": len(splits.test),
        },
        wall_seconds=round(time.time() - t0, 3),
    )
    print(f"prepared {ds.name}: {len(ds)} records, splits "
          f"{len(splits.target_train)}/{len(splits.shadow_train)}/{len(splits.test)}")
    return EXIT_OK


def cmd_train_target(cfg: RunConfig, out_dir: Path) -> int:
    t0 = time.time()
    ds, splits = _load_run_inputs(out_dir)
    run = experiments.train_target(ds, splits, cfg.settings(), cfg.target_sgd.seed)
    path = out_dir / "target.ckpt"
    save_network(run.target, path)
    record_phase(
        out_dir, "train-target", cfg.config_hash(), {"checkpoint": path},
        info={"arch": cfg.target_arch,
              "train_acc": run.target_train_acc, "test_acc": run.target_test_acc,
              "overfitting_level": run.target_overfit},
        wall_seconds=round(time.time() - t0, 3),
        reads=["prepare-data/dataset", "prepare-data/splits"],
    )
    print(f"target {cfg.target_arch}: train acc {run.target_train_acc:.4f}, "
          f"test acc {run.target_test_acc:.4f}")
    return EXIT_OK


def cmd_distill_shadow(cfg: RunConfig, out_dir: Path) -> int:
    t0 = time.time()
    ds, splits = _load_run_inputs(out_dir)
    target_path = require_artifact(out_dir, "train-target", "checkpoint")
    oracle = models.as_oracle(load_network(target_path))
    shadow, hist = attack.distill_shadow(
        oracle, cfg.shadow_arch, ds, splits.shadow_train, cfg.distill,
        cfg.shadow_sgd, eval_idx=splits.test, history_cap=cfg.history_cap,
    )
    path = out_dir / "shadow.ckpt"
    save_network(shadow, path)
    record_phase(
        out_dir, "distill-shadow", cfg.config_hash(), {"checkpoint": path},
        info={"arch": cfg.shadow_arch,
              "temperature": cfg.distill.temperature,
              "alpha": cfg.distill.alpha, "beta": cfg.distill.beta,
              "oracle_queries": oracle.query_count,
              "train_acc": models.accuracy(shadow, ds, splits.shadow_train),
              "test_acc": models.accuracy(shadow, ds, splits.test)},
        wall_seconds=round(time.time() - t0, 3),
        reads=["prepare-data/dataset", "prepare-data/splits",
               "train-target/checkpoint (as oracle host)"],
    )
    print(f"shadow {cfg.shadow_arch}: {oracle.query_count} oracle queries, "
          f"test acc {models.accuracy(shadow, ds, splits.test):.4f}")
    return EXIT_OK


def cmd_build_attack(cfg: RunConfig, out_dir: Path) -> int:
    t0 = time.time()
    ds, splits = _load_run_inputs(out_dir)
    shadow_path = require_artifact(out_dir, "distill-shadow", "checkpoint")
    shadow = load_network(shadow_path)
    aset = attack.build_attack_set(
        shadow, ds, splits.shadow_train, shadow_out_pool(splits),
        balance_seed=cfg.balance_seed,
    )
    path = out_dir / "attack_set.bin"
    attack.save_attack_set(aset, path)
    record_phase(
        out_dir, "build-attack", cfg.config_hash(), {"attack_set": path},
        info={"classes": len(aset.by_class), "dropped": aset.dropped_classes,
              "records_pre_balance": aset.pre_balance_count},
        wall_seconds=round(time.time() - t0, 3),
        reads=["prepare-data/dataset", "prepare-data/splits", "distill-shadow/checkpoint"],
    )
    print(f"attack set: {len(aset.by_class)} class buckets")
    return EXIT_OK


def cmd_train_attack(cfg: RunConfig, out_dir: Path) -> int:
    t0 = time.time()
    aset_path = require_artifact(out_dir, "build-attack", "attack_set")
    aset = attack.load_attack_set(aset_path)
    model = attack.train_attack_models(aset, cfg.attack_sgd)
    path = out_dir / "attack_models.bin"
    attack.save_attack_model(model, path)
    record_phase(
        out_dir, "train-attack", cfg.config_hash(), {"attack_models": path},
        info={"classifiers": len(model.per_class)},
        wall_seconds=round(time.time() - t0, 3),
        reads=["build-attack/attack_set"],
    )
    print(f"trained {len(model.per_class)} per-class attack models plus fallback")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out_dir: Path) -> int:
    t0 = time.time()
    ds, splits = _load_run_inputs(out_dir)
    target_path = require_artifact(out_dir, "train-target", "checkpoint")
    model_path = require_artifact(out_dir, "train-attack", "attack_models")
    oracle = models.as_oracle(load_network(target_path))
    model = attack.load_attack_model(model_path)
    members, nonmembers = balanced_eval_sets(splits, cfg.eval_seed, cfg.eval_cap)
    report = attack.evaluate_attack(model, oracle, ds, members, nonmembers)
    report.metadata.update({"eval_seed": cfg.eval_seed, "config_hash": cfg.config_hash()})
    path = out_dir / "report.json"
    with open(path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
        f.write("\n")
    record_phase(
        out_dir, "evaluate", cfg.config_hash(), {"report": path},
        info={"ap": report.ap, "ar": report.ar, "f1": report.f1},
        wall_seconds=round(time.time() - t0, 3),
        reads=["prepare-data/dataset", "prepare-data/splits",
               "train-target/checkpoint (as oracle host)", "train-attack/attack_models"],
    )
    print(f"attack: AP {report.ap:.4f}  AR {report.ar:.4f}  F1 {report.f1:.4f}")
    return EXIT_OK


def _write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def cmd_experiment(cfg: RunConfig, out_dir: Path, name: str) -> int:
    if name not in EXPERIMENT_NAMES:
        raise ConfigError(f"unknown experiment {name!r}; known: {list(EXPERIMENT_NAMES)}")
    t0 = time.time()
    ds, splits = _load_run_inputs(out_dir)
    settings = cfg.settings()
    exp = cfg.experiment
    json_path = out_dir / f"experiment_{name}.json"
    csv_path = out_dir / f"experiment_{name}.csv"

    if name == "ablation":
        result = experiments.experiment_ablation(ds, splits, exp.seeds, settings)
        doc = {"experiment": name, "seeds": exp.seeds, "summary": result.summary()}
        rows = result.rows()
    elif name == "missing-class":
        result = experiments.experiment_missing_class(
            ds, splits, exp.missing_class, settings,
            seed=exp.seeds[0], bias_shift=exp.bias_shift,
        )
        doc = {"experiment": name, "seed": exp.seeds[0], **result.to_dict()}
        acc = result.to_dict()["removed_class_accuracy"]
        rows = [{"variant": k, "removed_class_accuracy": v} for k, v in acc.items()]
    elif name == "overfit-sweep":
        result = experiments.experiment_overfit_sweep(
            ds, splits, exp.epoch_grid, settings, seed=exp.seeds[0]
        )
        doc = {"experiment": name, "seed": exp.seeds[0],
               "spearman_target_vs_shadow_overfit": result.spearman(),
               "points": result.rows()}
        rows = result.rows()
    else:
        result = experiments.experiment_architectures(ds, splits, exp.arch_list, exp.seeds, settings)
        doc = {"experiment": name, "seeds": exp.seeds, "mean_f1": result.mean_f1()}
        rows = result.rows()

    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_csv(csv_path, rows)
    record_phase(
        out_dir, f"experiment-{name}", cfg.config_hash(),
        {"summary": json_path, "curves": csv_path},
        info={"seeds": exp.seeds},
        wall_seconds=round(time.time() - t0, 3),
        reads=["prepare-data/dataset", "prepare-data/splits"],
    )
    print(f"experiment {name} written to {json_path.name} / {csv_path.name}")
    return EXIT_OK


def cmd_report(out_dir: Path) -> int:
    doc = load_manifest(out_dir)
    if not doc["phases"]:
        print("no runs recorded in this output directory")
        return EXIT_OK
    problems = verify_manifest(out_dir)
    if problems:
        for p in problems:
            print(f"INTEGRITY: {p}", file=sys.stderr)
        raise IntegrityError(f"{len(problems)} artifact(s) failed verification")
    print(f"config hash: {doc.get('config_hash')}")
    print(f"{'phase':<24} {'wall_s':>8}  artifacts")
    for phase, entry in doc["phases"].items():
        arts = ", ".join(entry["artifacts"])
        print(f"{phase:<24} {entry.get('wall_seconds', 0):>8}  {arts}")
        for key in ("train_acc", "test_acc", "overfitting_level", "ap", "ar", "f1"):
            if key in entry.get("info", {}):
                print(f"{'':<24} {key} = {entry['info'][key]:.4f}")
    report_path = Path(out_dir) / "report.json"
    if report_path.is_file():
        with open(report_path, encoding="utf-8") as f:
            rep = json.load(f)
        m = rep["metrics"]
        print("\nattack metrics")
        for k in ("ap", "ar", "f1"):
            print(f"  {k.upper():<3} = {m[k]:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lleaks",
        description="Membership-inference lab: distill shadows from a black-box "
                    "target's logits and attack per-class posteriors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    phases = [
        ("prepare-data", "generate/load the dataset and write disjoint splits"),
        ("train-target", "train the victim classifier"),
        ("distill-shadow", "train the shadow against the target oracle"),
        ("build-attack", "assemble per-class (posterior, membership) records"),
        ("train-attack", "fit the per-class membership classifiers"),
        ("evaluate", "score the attack on the target's true members"),
    ]
    for name, help_text in phases:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    p = sub.add_parser("experiment", help="run a named experiment suite")
    p.add_argument("name", choices=EXPERIMENT_NAMES)
    _add_common(p)
    p = sub.add_parser("report", help="verify artifacts and print a run summary")
    p.add_argument("--out", help="output directory (default $LLEAKS_OUT)")
    return parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to the run config file")
    p.add_argument("--out", help="output directory (default $LLEAKS_OUT)")
    p.add_argument("--seed", type=int, default=None,
                   help="override every seed in the config from this master seed")


def resolve_out_dir(args) -> Path:
    out = getattr(args, "out", None) or os.environ.get("LLEAKS_OUT")
    if not out:
        raise ConfigError("no output directory: pass --out or set LLEAKS_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out_dir = resolve_out_dir(args)
        if args.command == "report":
            return cmd_report(out_dir)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = apply_seed_override(cfg, args.seed)
        with OutputLock(out_dir):
            if args.command == "prepare-data":
                return cmd_prepare_data(cfg, out_dir)
            if args.command == "train-target":
                return cmd_train_target(cfg, out_dir)
            if args.command == "distill-shadow":
                return cmd_distill_shadow(cfg, out_dir)
            if args.command == "build-attack":
                return cmd_build_attack(cfg, out_dir)
            if args.command == "train-attack":
                return cmd_train_attack(cfg, out_dir)
            if args.command == "evaluate":
                return cmd_evaluate(cfg, out_dir)
            if args.command == "experiment":
                return cmd_experiment(cfg, out_dir, args.name)
        raise ConfigError(f"unhandled command {args.command}")
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingPrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
