"""Architecture registry, classifier training, and the black-box oracle boundary.

The registry covers one target architecture (lenet5), three shadow variants
(shadow-nn, fc-only, vgg-mini), and a tabular MLP. Every hidden dense/conv
layer is followed by relu. Training is plain momentum SGD over batch-mean
cross-entropy; the same loop drives distillation (a different gradient
callback) so the two paths share shuffling and update arithmetic exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses, nncore
from .data import Dataset
from .nncore import Gradients, Layer, Network, SgdConfig

ARCH_IDS = ("lenet5", "shadow-nn", "fc-only", "vgg-mini", "mlp-tabular")
IMAGE_ARCHS = ("lenet5", "shadow-nn", "vgg-mini", "fc-only")


class _Builder:
    """Tracks the activation shape while assembling zero-initialized layers."""

    def __init__(self, input_shape):
        self.shape = tuple(input_shape)
        self.layers: list[Layer] = []

    def conv(self, out_ch, k):
        c, h, w = self.shape
        self.layers.append(
            Layer("conv2d", np.zeros((out_ch, c, k, k)), np.zeros(out_ch),
                  {"kernel": k, "out_channels": out_ch})
        )
        self.shape = (out_ch, h - k + 1, w - k + 1)
        if self.shape[1] < 1 or self.shape[2] < 1:
            raise ValueError(f"conv {k}x{k} does not fit activation {h}x{w}")
        return self

    def relu(self):
        self.layers.append(Layer("relu"))
        return self

    def pool(self):
        c, h, w = self.shape
        self.layers.append(Layer("maxpool2x2"))
        self.shape = (c, h // 2, w // 2)
        return self

    def flatten(self):
        self.layers.append(Layer("flatten"))
        self.shape = (int(np.prod(self.shape)),)
        return self

    def dense(self, out):
        if len(self.shape) != 1:
            raise ValueError("dense layer needs a flat activation")
        fan_in = self.shape[0]
        self.layers.append(
            Layer("dense", np.zeros((out, fan_in)), np.zeros(out), {"units": out})
        )
        self.shape = (out,)
        return self


def _lenet5(input_shape, num_classes):
    b = _Builder(input_shape)
    b.conv(6, 5).relu().pool().conv(16, 5).relu().pool().flatten()
    b.dense(120).relu().dense(84).relu().dense(num_classes)
    return b.layers


def _shadow_nn(input_shape, num_classes):
    b = _Builder(input_shape)
    b.conv(8, 3).relu().pool().conv(16, 3).relu().pool().flatten()
    b.dense(128).relu().dense(64).relu().dense(num_classes)
    return b.layers


def _fc_only(input_shape, num_classes):
    b = _Builder(input_shape)
    b.flatten().dense(256).relu().dense(128).relu().dense(num_classes)
    return b.layers


def _vgg_mini(input_shape, num_classes):
    b = _Builder(input_shape)
    for _ in range(2):
        b.conv(16, 3).relu().conv(16, 3).relu().pool()
    b.flatten().dense(128).relu().dense(num_classes)
    return b.layers


def _mlp_tabular(input_shape, num_classes):
    b = _Builder(input_shape)
    b.dense(512).relu().dense(128).relu().dense(num_classes)
    return b.layers


def _attack_mlp(input_shape, num_classes):
    # binary membership classifier over a sorted posterior vector
    b = _Builder(input_shape)
    b.dense(64).relu().dense(num_classes)
    return b.layers


nncore.register_arch("lenet5", _lenet5)
nncore.register_arch("shadow-nn", _shadow_nn)
nncore.register_arch("fc-only", _fc_only)
nncore.register_arch("vgg-mini", _vgg_mini)
nncore.register_arch("mlp-tabular", _mlp_tabular)
nncore.register_arch("attack-mlp", _attack_mlp)


def build_arch(arch_id: str, input_shape, num_classes: int, seed: int) -> Network:
    """Instantiate a registry architecture with seeded weights."""
    if arch_id not in ARCH_IDS:
        raise ValueError(f"unknown architecture {arch_id!r}; known: {list(ARCH_IDS)}")
    input_shape = tuple(int(d) for d in input_shape)
    if arch_id in IMAGE_ARCHS and len(input_shape) != 3:
        raise ValueError(f"{arch_id} needs (channels, h, w) input, got {input_shape}")
    if arch_id == "mlp-tabular" and len(input_shape) != 1:
        raise ValueError(f"mlp-tabular needs flat (features,) input, got {input_shape}")
    return nncore.init_network(arch_id, input_shape, num_classes, seed)


@dataclass
class TrainHistory:
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    mean_loss: list[float] = field(default_factory=list)


class TeacherOracle:
    """Black-box access to a model: batch of inputs -> logits, nothing else.

    Holds only an opaque query callable, so downstream code cannot reach
    weights, architecture, or gradients through this boundary. Every call is
    counted.
    """

    __slots__ = ("_query", "query_count")

    def __init__(self, query_fn: Callable[[np.ndarray], np.ndarray]):
        self._query = query_fn
        self.query_count = 0

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        self.query_count += 1
        return self._query(batch)


def as_oracle(net: Network) -> TeacherOracle:
    """Wrap a trained network as a logits-only black box."""
    return TeacherOracle(lambda batch: nncore.forward(net, batch))


def accuracy(net: Network, ds: Dataset, idx: np.ndarray, batch_size: int = 512) -> float:
    """Fraction of samples whose argmax logit matches the label."""
    idx = np.asarray(idx)
    if len(idx) == 0:
        raise ValueError("accuracy over an empty index set")
    hits = 0
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        logits = nncore.forward(net, ds.features[chunk])
        hits += int((logits.argmax(axis=1) == ds.labels[chunk]).sum())
    return hits / len(idx)


def overfitting_level(net: Network, ds: Dataset, train_idx, test_idx) -> float:
    """Train accuracy minus test accuracy; the leakage proxy."""
    train_idx = np.asarray(train_idx)
    test_idx = np.asarray(test_idx)
    if np.intersect1d(train_idx, test_idx).size:
        raise ValueError("overfitting level needs disjoint index sets")
    return accuracy(net, ds, train_idx) - accuracy(net, ds, test_idx)


# grad_fn(logits, xb, yb) -> (scalar loss, d loss / d logits)
GradFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def run_sgd(
    net: Network,
    ds: Dataset,
    train_idx: np.ndarray,
    eval_idx: np.ndarray | None,
    cfg: SgdConfig,
    grad_fn: GradFn,
    history_cap: int | None = None,
) -> tuple[Network, TrainHistory]:
    """Generic epoch loop shared by classifier training and distillation.

    Shuffling consumes only the loop's own generator (seeded from cfg.seed),
    so two runs with identical seeds and equivalent grad_fns produce
    bit-identical trajectories. history_cap bounds the per-epoch accuracy
    bookkeeping to a fixed seeded subsample of each index set.
    """
    train_idx = np.asarray(train_idx)
    rng = np.random.default_rng(cfg.seed)
    hist_rng = np.random.default_rng((cfg.seed, 0x51DE))

    def _subsample(idx):
        if idx is None or history_cap is None or len(idx) <= history_cap:
            return idx
        return idx[hist_rng.permutation(len(idx))[:history_cap]]

    train_eval = _subsample(train_idx)
    test_eval = _subsample(eval_idx)

    velocity = Gradients.zeros(net)
    history = TrainHistory()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_idx))
        shuffled = train_idx[order]
        loss_sum = 0.0
        for start in range(0, len(shuffled), cfg.batch_size):
            chunk = shuffled[start:start + cfg.batch_size]
            xb, yb = ds.features[chunk], ds.labels[chunk]
            trace = nncore.forward_trace(net, xb)
            loss, dlogits = grad_fn(trace.logits, xb, yb)
            grads = nncore.backward_trace(trace, dlogits)
            net, velocity = nncore.sgd_step(net, grads, cfg, velocity)
            loss_sum += loss * len(chunk)
        history.mean_loss.append(loss_sum / len(train_idx))
        history.train_acc.append(accuracy(net, ds, train_eval))
        history.test_acc.append(
            accuracy(net, ds, test_eval) if test_eval is not None and len(test_eval) else float("nan")
        )
    return net, history


_LABEL_CFG = losses.DistillConfig(temperature=1.0, alpha=0.0, beta=1.0)


def label_grad_fn(logits: np.ndarray, xb: np.ndarray, yb: np.ndarray):
    """Batch-mean cross-entropy on softmax outputs, as a run_sgd callback."""
    return losses.distill_loss_batch(logits, logits, yb, _LABEL_CFG)


def train_classifier(
    net: Network,
    ds: Dataset,
    train_idx: np.ndarray,
    eval_idx: np.ndarray | None,
    cfg: SgdConfig,
    history_cap: int | None = None,
) -> tuple[Network, TrainHistory]:
    """SGD on mean cross-entropy of softmaxed logits against the labels."""
    return run_sgd(net, ds, train_idx, eval_idx, cfg, label_grad_fn, history_cap)
