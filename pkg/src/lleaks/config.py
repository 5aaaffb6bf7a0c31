"""Run configuration: a flat key=value file with section headers.

Parsed with configparser into a validated RunConfig. Every random choice in a
run is driven by a seed named here; nothing reads entropy implicitly. The
config hash covers the normalized key/value pairs so reruns can be matched to
their artifacts.
"""
from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .experiments import PipelineSettings, default_workers
from .losses import DistillConfig
from .nncore import SgdConfig

DATASET_NAMES = ("synthetic-images", "mnist", "purchase-like", "texas-like", "toy")


class ConfigError(ValueError):
    """The config file is missing, malformed, or inconsistent."""


@dataclass
class DatasetSpec:
    name: str
    seed: int
    n: int = 0
    num_classes: int = 0
    n_features: int = 0
    flip_prob: float = 0.15
    noise: float = 0.22
    ambiguous_frac: float = 0.08
    images_path: str = ""
    labels_path: str = ""


@dataclass
class ExperimentSpec:
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    epoch_grid: list[int] = field(default_factory=lambda: [2, 5, 10, 18, 30])
    missing_class: int = 2
    bias_shift: float = 4.0
    arch_list: list[str] = field(default_factory=lambda: ["vgg-mini", "shadow-nn", "fc-only"])


@dataclass
class RunConfig:
    dataset: DatasetSpec
    split_sizes: tuple[int, int, int]
    split_seed: int
    target_arch: str
    target_sgd: SgdConfig
    shadow_arch: str
    shadow_sgd: SgdConfig
    distill: DistillConfig
    attack_sgd: SgdConfig
    balance_seed: int
    eval_seed: int
    eval_cap: int
    history_cap: int | None
    workers: int
    experiment: ExperimentSpec
    raw_items: list[tuple[str, str, str]]

    def config_hash(self) -> str:
        canon = "\n".join(f"{s}.{k}={v}" for s, k, v in sorted(self.raw_items))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def settings(self) -> PipelineSettings:
        return PipelineSettings(
            target_arch=self.target_arch,
            shadow_arch=self.shadow_arch,
            distill=self.distill,
            target_sgd=self.target_sgd,
            shadow_sgd=self.shadow_sgd,
            attack_sgd=self.attack_sgd,
            eval_cap=self.eval_cap,
            history_cap=self.history_cap,
            workers=self.workers,
        )


def _get(cp, section, key, cast, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"missing required key [{section}] {key}")
        return default
    raw = cp.get(section, key)
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


def _int_list(raw: str) -> list[int]:
    return [int(v) for v in raw.replace(",", " ").split()]


def _str_list(raw: str) -> list[str]:
    return [v for v in raw.replace(",", " ").split()]


def _sgd(cp, section, defaults) -> SgdConfig:
    return SgdConfig(
        learning_rate=_get(cp, section, "learning_rate", float, defaults[0]),
        momentum=_get(cp, section, "momentum", float, defaults[1]),
        batch_size=_get(cp, section, "batch_size", int, defaults[2]),
        epochs=_get(cp, section, "epochs", int, defaults[3]),
        seed=_get(cp, section, "seed", int, required=True),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    name = _get(cp, "dataset", "name", str, required=True)
    if name not in DATASET_NAMES:
        raise ConfigError(f"unknown dataset {name!r}; known: {list(DATASET_NAMES)}")
    ds = DatasetSpec(
        name=name,
        seed=_get(cp, "dataset", "seed", int, required=True),
        n=_get(cp, "dataset", "n", int, 0),
        num_classes=_get(cp, "dataset", "num_classes", int, 0),
        n_features=_get(cp, "dataset", "n_features", int, 0),
        flip_prob=_get(cp, "dataset", "flip_prob", float, 0.15),
        noise=_get(cp, "dataset", "noise", float, 0.14),
        ambiguous_frac=_get(cp, "dataset", "ambiguous_frac", float, 0.05),
        images_path=_get(cp, "dataset", "images_path", str, ""),
        labels_path=_get(cp, "dataset", "labels_path", str, ""),
    )
    if name == "mnist":
        for key, p in (("images_path", ds.images_path), ("labels_path", ds.labels_path)):
            if not p:
                raise ConfigError(f"dataset mnist requires [dataset] {key}")
            if not os.path.isfile(p):
                raise ConfigError(f"[dataset] {key} does not exist: {p}")

    sizes = (
        _get(cp, "split", "target_train", int, required=True),
        _get(cp, "split", "shadow_train", int, required=True),
        _get(cp, "split", "test", int, required=True),
    )
    distill = DistillConfig(
        temperature=_get(cp, "shadow", "temperature", float, 4.0),
        alpha=_get(cp, "shadow", "alpha", float, 0.9),
        beta=_get(cp, "shadow", "beta", float, 0.1),
    )
    history_cap = _get(cp, "experiment", "history_cap", int, 2000)
    cfg = RunConfig(
        dataset=ds,
        split_sizes=sizes,
        split_seed=_get(cp, "split", "seed", int, required=True),
        target_arch=_get(cp, "target", "arch", str, "lenet5"),
        target_sgd=_sgd(cp, "target", (0.05, 0.9, 64, 30)),
        shadow_arch=_get(cp, "shadow", "arch", str, "shadow-nn"),
        shadow_sgd=_sgd(cp, "shadow", (0.02, 0.9, 64, 30)),
        distill=distill,
        attack_sgd=_sgd(cp, "attack", (0.1, 0.9, 32, 30)),
        balance_seed=_get(cp, "attack", "balance_seed", int, required=True),
        eval_seed=_get(cp, "attack", "eval_seed", int, required=True),
        eval_cap=_get(cp, "attack", "eval_cap", int, 2500),
        history_cap=history_cap if history_cap > 0 else None,
        workers=_get(cp, "experiment", "workers", int, 0) or default_workers(),
        experiment=ExperimentSpec(
            seeds=_get(cp, "experiment", "seeds", _int_list, [1, 2, 3]),
            epoch_grid=_get(cp, "experiment", "epoch_grid", _int_list, [2, 5, 10, 18, 30]),
            missing_class=_get(cp, "experiment", "missing_class", int, 2),
            bias_shift=_get(cp, "experiment", "bias_shift", float, 4.0),
            arch_list=_get(cp, "experiment", "arch_list", _str_list,
                           ["vgg-mini", "shadow-nn", "fc-only"]),
        ),
        raw_items=[(s, k, cp.get(s, k)) for s in cp.sections() for k in cp[s]],
    )
    return cfg


def apply_seed_override(cfg: RunConfig, seed: int) -> RunConfig:
    """--seed N: re-derive every seed in the config from one master value."""
    from dataclasses import replace

    cfg.dataset.seed = seed
    return replace(
        cfg,
        split_seed=seed + 1,
        target_sgd=replace(cfg.target_sgd, seed=seed + 2),
        shadow_sgd=replace(cfg.shadow_sgd, seed=seed + 3),
        attack_sgd=replace(cfg.attack_sgd, seed=seed + 4),
        balance_seed=seed + 5,
        eval_seed=seed + 6,
        raw_items=cfg.raw_items + [("override", "seed", str(seed))],
    )
