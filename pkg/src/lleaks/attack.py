"""Membership-inference pipeline: shadow distillation, attack sets, attack models.

The target model is reachable from here only as a TeacherOracle (a callable
returning logits). Shadow and attack models are adversary-owned: this module
builds and trains them through the engine's functional API without ever
touching layer internals, loading checkpoints, or unwrapping an oracle.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import losses, models, nncore
from .data import Dataset
from .losses import DistillConfig
from .models import TeacherOracle, TrainHistory
from .nncore import SgdConfig

# majority side of each class bucket is subsampled down to this ratio (60/40)
BALANCE_RATIO = 1.5

ATTACK_SET_MAGIC = b"LLASET1\x00"
ATTACK_MODEL_MAGIC = b"LLAMDL1\x00"


@dataclass
class AttackSet:
    """Per-class (posterior, membership bit) records, balanced within class."""

    by_class: dict[int, tuple[np.ndarray, np.ndarray]]
    num_classes: int
    dropped_classes: list[int] = field(default_factory=list)
    pre_balance_count: int = 0


@dataclass
class AttackModel:
    """One binary member/non-member classifier per target class plus a fallback.

    Classifiers read the descending-sorted posterior vector; the fallback is
    trained on the union of all class buckets and scores records whose class
    has no dedicated model.
    """

    per_class: dict[int, object]
    fallback: object
    num_classes: int


@dataclass
class AttackReport:
    ap: float
    ar: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    per_class: list[dict]
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "metrics": {"ap": self.ap, "ar": self.ar, "f1": self.f1},
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "per_class": self.per_class,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @staticmethod
    def from_dict(doc: dict) -> "AttackReport":
        m, c = doc["metrics"], doc["confusion"]
        return AttackReport(m["ap"], m["ar"], m["f1"], c["tp"], c["fp"], c["tn"], c["fn"],
                            doc["per_class"], doc["metadata"])


def confusion_metrics(tp: int, fp: int, tn: int, fn: int) -> tuple[float, float, float]:
    """Attack precision, recall, and F1 from confusion counts (0 when undefined)."""
    ap = tp / (tp + fp) if tp + fp else 0.0
    ar = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * ap * ar / (ap + ar) if ap + ar else 0.0
    return ap, ar, f1


def confusion_from_predictions(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError("prediction/truth length mismatch")
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    tn = int((~pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    return tp, fp, tn, fn


def posteriors(model: object, ds: Dataset, idx: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Softmaxed logits of an adversary-owned model over an index set."""
    idx = np.asarray(idx)
    out = np.empty((len(idx), ds.num_classes))
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        out[start:start + len(chunk)] = losses.softmax(nncore.forward(model, ds.features[chunk]))
    return out


def oracle_posteriors(oracle: TeacherOracle, ds: Dataset, idx: np.ndarray,
                      batch_size: int = 512) -> np.ndarray:
    """Softmaxed logits obtained through black-box queries."""
    idx = np.asarray(idx)
    out = np.empty((len(idx), ds.num_classes))
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        out[start:start + len(chunk)] = losses.softmax(oracle(ds.features[chunk]))
    return out


def distill_shadow(
    oracle: TeacherOracle,
    shadow_arch: str,
    ds: Dataset,
    shadow_idx: np.ndarray,
    cfg: DistillConfig,
    sgd: SgdConfig,
    eval_idx: np.ndarray | None = None,
    history_cap: int | None = None,
) -> tuple[object, TrainHistory]:
    """Train a shadow model against the oracle's logits.

    Per batch the oracle is queried once; its logits are constants (no
    gradient reaches the teacher). The combined loss mixes temperature-T KL
    against the teacher with label cross-entropy at temperature 1. The caller
    guarantees shadow_idx is disjoint from the target's training indices.
    """
    student = models.build_arch(shadow_arch, ds.input_shape, ds.num_classes, sgd.seed)

    def grad_fn(student_logits, xb, yb):
        teacher_logits = oracle(xb)
        if teacher_logits.shape != student_logits.shape:
            raise ValueError(
                f"oracle returned shape {teacher_logits.shape} for a batch of "
                f"{len(xb)} samples, expected {student_logits.shape}"
            )
        return losses.distill_loss_batch(teacher_logits, student_logits, yb, cfg)

    return models.run_sgd(student, ds, shadow_idx, eval_idx, sgd, grad_fn, history_cap)


def build_attack_set(
    shadow: object,
    ds: Dataset,
    shadow_train_idx: np.ndarray,
    shadow_out_idx: np.ndarray,
    balance_seed: int = 0,
) -> AttackSet:
    """Label shadow-train posteriors 1 and held-out posteriors 0, bucketed by class.

    Records land in the bucket of their ground-truth label. Within each bucket
    the majority side is randomly subsampled so neither side exceeds 60% of
    the bucket. Classes missing records on either side are dropped with a
    warning.
    """
    shadow_train_idx = np.asarray(shadow_train_idx)
    shadow_out_idx = np.asarray(shadow_out_idx)
    if np.intersect1d(shadow_train_idx, shadow_out_idx).size:
        raise ValueError("attack-set index sets must be disjoint")
    post_in = posteriors(shadow, ds, shadow_train_idx)
    post_out = posteriors(shadow, ds, shadow_out_idx)
    labels_in = ds.labels[shadow_train_idx]
    labels_out = ds.labels[shadow_out_idx]

    rng = np.random.default_rng(balance_seed)
    by_class: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    dropped = []
    for c in range(ds.num_classes):
        p1 = post_in[labels_in == c]
        p0 = post_out[labels_out == c]
        if len(p1) == 0 or len(p0) == 0:
            if len(p1) or len(p0):
                dropped.append(c)
            continue
        cap = int(BALANCE_RATIO * min(len(p1), len(p0)))
        if len(p1) > cap:
            p1 = p1[rng.choice(len(p1), size=cap, replace=False)]
        if len(p0) > cap:
            p0 = p0[rng.choice(len(p0), size=cap, replace=False)]
        post = np.concatenate([p1, p0])
        bits = np.concatenate([np.ones(len(p1), dtype=np.int64), np.zeros(len(p0), dtype=np.int64)])
        by_class[c] = (post, bits)
    if dropped:
        warnings.warn(f"attack set dropped classes with a one-sided bucket: {dropped}")
    return AttackSet(by_class, ds.num_classes, dropped,
                     pre_balance_count=len(shadow_train_idx) + len(shadow_out_idx))


def _sorted_desc(posterior_rows: np.ndarray) -> np.ndarray:
    return np.sort(posterior_rows, axis=1)[:, ::-1]


def _derive_seed(base: int, tag: int) -> int:
    return int(np.random.SeedSequence([base, tag]).generate_state(1)[0])


def _fit_membership_classifier(post: np.ndarray, bits: np.ndarray, sgd: SgdConfig, seed: int):
    feats = _sorted_desc(post)
    train_ds = Dataset(feats, bits, 2, "attack-bucket")
    cfg = SgdConfig(sgd.learning_rate, sgd.momentum, sgd.batch_size, sgd.epochs, seed)
    net = nncore.init_network("attack-mlp", (feats.shape[1],), 2, seed)
    net, _ = models.run_sgd(net, train_ds, np.arange(len(train_ds)), None, cfg,
                            models.label_grad_fn)
    return net


def train_attack_models(aset: AttackSet, sgd: SgdConfig) -> AttackModel:
    """Fit one binary classifier per class bucket plus a union-trained fallback."""
    if not aset.by_class:
        raise ValueError("attack set has no populated class buckets")
    per_class = {}
    for c in sorted(aset.by_class):
        post, bits = aset.by_class[c]
        per_class[c] = _fit_membership_classifier(post, bits, sgd, _derive_seed(sgd.seed, c))
    all_post = np.concatenate([aset.by_class[c][0] for c in sorted(aset.by_class)])
    all_bits = np.concatenate([aset.by_class[c][1] for c in sorted(aset.by_class)])
    fallback = _fit_membership_classifier(all_post, all_bits, sgd,
                                          _derive_seed(sgd.seed, aset.num_classes + 1))
    return AttackModel(per_class, fallback, aset.num_classes)


def predict_membership(model: AttackModel, posterior_rows: np.ndarray,
                       class_ids: np.ndarray) -> tuple[np.ndarray, int]:
    """Route each posterior to its class's classifier; member iff logit 1 wins.

    Returns (bool predictions, number of records scored by the fallback).
    """
    posterior_rows = np.asarray(posterior_rows)
    class_ids = np.asarray(class_ids)
    feats = _sorted_desc(posterior_rows)
    pred = np.zeros(len(feats), dtype=bool)
    fallback_count = 0
    for c in np.unique(class_ids):
        mask = class_ids == c
        clf = model.per_class.get(int(c))
        if clf is None:
            clf = model.fallback
            fallback_count += int(mask.sum())
        logits = nncore.forward(clf, feats[mask])
        pred[mask] = logits[:, 1] > logits[:, 0]
    return pred, fallback_count


def evaluate_attack(
    model: AttackModel,
    target_oracle: TeacherOracle,
    ds: Dataset,
    member_idx: np.ndarray,
    nonmember_idx: np.ndarray,
) -> AttackReport:
    """Score the attack against the target oracle.

    member_idx must be actual target-training records; nonmember_idx must be
    disjoint from everything used to build or train the attack. Each record is
    queried black-box, softmaxed, sorted, and routed by its ground-truth label.
    """
    member_idx = np.asarray(member_idx)
    nonmember_idx = np.asarray(nonmember_idx)
    if np.intersect1d(member_idx, nonmember_idx).size:
        raise ValueError("member and non-member evaluation sets must be disjoint")
    queries_before = target_oracle.query_count

    idx = np.concatenate([member_idx, nonmember_idx])
    truth = np.concatenate([
        np.ones(len(member_idx), dtype=bool), np.zeros(len(nonmember_idx), dtype=bool)
    ])
    post = oracle_posteriors(target_oracle, ds, idx)
    pred, fallback_count = predict_membership(model, post, ds.labels[idx])

    tp, fp, tn, fn = confusion_from_predictions(pred, truth)
    ap, ar, f1 = confusion_metrics(tp, fp, tn, fn)
    per_class = []
    for c in range(ds.num_classes):
        mask = ds.labels[idx] == c
        if not mask.any():
            continue
        ctp, cfp, ctn, cfn = confusion_from_predictions(pred[mask], truth[mask])
        cap_, car_, cf1_ = confusion_metrics(ctp, cfp, ctn, cfn)
        per_class.append({
            "class_id": int(c), "count": int(mask.sum()),
            "tp": ctp, "fp": cfp, "tn": ctn, "fn": cfn,
            "ap": cap_, "ar": car_, "f1": cf1_,
            "has_model": int(c) in model.per_class,
        })
    metadata = {
        "members": int(len(member_idx)),
        "nonmembers": int(len(nonmember_idx)),
        "fallback_scored": int(fallback_count),
        "oracle_queries": int(target_oracle.query_count - queries_before),
    }
    return AttackReport(ap, ar, f1, tp, fp, tn, fn, per_class, metadata)


# ---------------------------------------------------------------------------
# On-disk containers (all little-endian, deterministic bytes)
#   attack set:    magic "LLASET1\0" | u32 num_classes | u32 pre_balance_count
#                  | u32 dropped... | u32 bucket count | per bucket:
#                  u32 class_id, u32 rows, f64 posteriors, u8 bits
#   attack models: magic "LLAMDL1\0" | u32 num_classes | u32 entries
#                  | per entry: i32 class_id (-1 = fallback), u32 size, checkpoint
# ---------------------------------------------------------------------------

def save_attack_set(aset: AttackSet, path) -> None:
    chunks = [ATTACK_SET_MAGIC, struct.pack("<II", aset.num_classes, aset.pre_balance_count)]
    chunks.append(struct.pack("<I", len(aset.dropped_classes)))
    chunks.append(struct.pack(f"<{len(aset.dropped_classes)}I", *aset.dropped_classes))
    chunks.append(struct.pack("<I", len(aset.by_class)))
    for c in sorted(aset.by_class):
        post, bits = aset.by_class[c]
        chunks.append(struct.pack("<II", c, len(bits)))
        chunks.append(np.ascontiguousarray(post, dtype="<f8").tobytes())
        chunks.append(np.asarray(bits, dtype=np.uint8).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_attack_set(path) -> AttackSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != ATTACK_SET_MAGIC:
        raise ValueError(f"bad magic in {path}: not an attack-set container")
    pos = 8
    num_classes, pre = struct.unpack("<II", data[pos:pos + 8]); pos += 8
    n_drop = struct.unpack("<I", data[pos:pos + 4])[0]; pos += 4
    dropped = list(struct.unpack(f"<{n_drop}I", data[pos:pos + 4 * n_drop])); pos += 4 * n_drop
    n_buckets = struct.unpack("<I", data[pos:pos + 4])[0]; pos += 4
    by_class = {}
    for _ in range(n_buckets):
        c, rows = struct.unpack("<II", data[pos:pos + 8]); pos += 8
        post = np.frombuffer(data[pos:pos + 8 * rows * num_classes], dtype="<f8")
        post = post.reshape(rows, num_classes).copy(); pos += 8 * rows * num_classes
        bits = np.frombuffer(data[pos:pos + rows], dtype=np.uint8).astype(np.int64); pos += rows
        by_class[int(c)] = (post, bits)
    if pos != len(data):
        raise ValueError(f"trailing bytes in attack-set container {path}")
    return AttackSet(by_class, num_classes, dropped, pre)


def save_attack_model(model: AttackModel, path) -> None:
    entries = [(c, model.per_class[c]) for c in sorted(model.per_class)]
    entries.append((-1, model.fallback))
    chunks = [ATTACK_MODEL_MAGIC, struct.pack("<II", model.num_classes, len(entries))]
    for c, net in entries:
        blob = nncore.network_to_bytes(net)
        chunks.append(struct.pack("<iI", c, len(blob)))
        chunks.append(blob)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_attack_model(path) -> AttackModel:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != ATTACK_MODEL_MAGIC:
        raise ValueError(f"bad magic in {path}: not an attack-model container")
    pos = 8
    num_classes, count = struct.unpack("<II", data[pos:pos + 8]); pos += 8
    per_class, fallback = {}, None
    for _ in range(count):
        c, size = struct.unpack("<iI", data[pos:pos + 8]); pos += 8
        net = nncore.network_from_bytes(data[pos:pos + size], path); pos += size
        if c < 0:
            fallback = net
        else:
            per_class[int(c)] = net
    if fallback is None:
        raise ValueError(f"attack-model container {path} lacks a fallback entry")
    if pos != len(data):
        raise ValueError(f"trailing bytes in attack-model container {path}")
    return AttackModel(per_class, fallback, num_classes)
