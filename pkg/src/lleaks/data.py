"""Datasets, loaders, synthetic generators, and disjoint split management.

Features are float64 arrays shaped [n, ...]; labels are int64 class indices.
The IDX reader follows the published big-endian MNIST layout. Synthetic
generators are fully seeded so a dataset is reproducible from its config.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
DATASET_MAGIC = b"LLDATA1\x00"
SPLIT_MAGIC = b"LLSPLT1\x00"

# Shape-mimicking presets for the non-redistributable tabular corpora.
# texas-like defaults to d=617 at desk scale (full width 6170).
TABULAR_PRESETS = {
    "purchase-like": {"n": 19324, "n_features": 600, "num_classes": 100},
    "texas-like": {"n": 67330, "n_features": 617, "num_classes": 100},
}


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels) or len(self.labels) < 1:
            raise ValueError("features and labels must be nonempty and aligned")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite feature values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])


@dataclass(frozen=True)
class SplitSpec:
    target_train_size: int
    shadow_train_size: int
    test_size: int
    seed: int

    def __post_init__(self):
        for v in (self.target_train_size, self.shadow_train_size, self.test_size):
            if v < 1:
                raise ValueError("split sizes must be positive")

    @property
    def total(self) -> int:
        return self.target_train_size + self.shadow_train_size + self.test_size


@dataclass
class SplitIndices:
    target_train: np.ndarray
    shadow_train: np.ndarray
    test: np.ndarray

    def parts(self):
        return (self.target_train, self.shadow_train, self.test)


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def _read_idx(path, expected_magic: int):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != expected_magic:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if expected_magic == IDX_IMAGE_MAGIC:
        if len(data) < 16:
            raise ValueError(f"{path}: truncated IDX image header")
        rows, cols = struct.unpack(">II", data[8:16])
        body = data[16:]
        if len(body) != count * rows * cols:
            raise ValueError(
                f"{path}: payload holds {len(body)} bytes, header promises {count * rows * cols}"
            )
        return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)
    body = data[8:]
    if len(body) != count:
        raise ValueError(f"{path}: payload holds {len(body)} labels, header promises {count}")
    return np.frombuffer(body, dtype=np.uint8)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Load an MNIST-format IDX image/label pair, scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise ValueError(
            f"image/label count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    feats = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(feats, labels.astype(np.int64), 10, "mnist")


def save_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def gen_synthetic_tabular(
    n: int, n_features: int, num_classes: int, seed: int, flip_prob: float = 0.15
) -> Dataset:
    """Binary feature matrix built from per-class prototype bit vectors.

    Each class owns a random binary prototype; a sample copies its class
    prototype and flips each bit independently with flip_prob. Labels are
    near-balanced. flip_prob=0.15 is tuned so a small MLP overfits visibly.
    """
    if min(n, n_features, num_classes) < 1:
        raise ValueError("n, n_features, num_classes must all be >= 1")
    rng = np.random.default_rng(seed)
    prototypes = rng.integers(0, 2, size=(num_classes, n_features), dtype=np.uint8)
    labels = rng.permutation(np.arange(n) % num_classes)
    flips = rng.random((n, n_features)) < flip_prob
    feats = np.logical_xor(prototypes[labels], flips).astype(np.float64)
    return Dataset(feats, labels, num_classes, "synthetic-tabular")


def tabular_prototypes(num_classes: int, n_features: int, seed: int) -> np.ndarray:
    """The prototype matrix gen_synthetic_tabular(seed=...) was built from."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(num_classes, n_features), dtype=np.uint8)


def gen_synthetic_images(
    n: int,
    num_classes: int,
    seed: int,
    image_hw: int = 28,
    n_basis: int = 12,
    noise: float = 0.14,
    max_shift: int = 2,
    ambiguous_frac: float = 0.05,
) -> Dataset:
    """Grayscale image dataset: class prototypes mixed from shared basis blobs.

    Every class renders a weighted combination of a common pool of Gaussian
    blobs, so classes share visual structure (confusable the way digits are).
    Samples apply a per-example shift, brightness jitter, and pixel noise. An
    ambiguous_frac slice of samples blends in a second class's prototype:
    those can only be fit by memorization, which gives a classifier a
    controllable train/test gap on top of high clean accuracy.
    """
    if min(n, num_classes) < 1:
        raise ValueError("n and num_classes must be >= 1")
    rng = np.random.default_rng(seed)
    hw = image_hw
    yy, xx = np.mgrid[0:hw, 0:hw]

    basis = np.empty((n_basis, hw, hw))
    for b in range(n_basis):
        cy, cx = rng.uniform(hw * 0.2, hw * 0.8, size=2)
        sy, sx = rng.uniform(1.6, 3.4, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        basis[b] = np.exp(-0.5 * ((u / sy) ** 2 + (v / sx) ** 2))

    # each class activates a few blobs; overlap between classes is deliberate
    weights = np.zeros((num_classes, n_basis))
    for c in range(num_classes):
        active = rng.choice(n_basis, size=rng.integers(3, 6), replace=False)
        weights[c, active] = rng.uniform(0.5, 1.0, size=len(active))
    prototypes = np.tensordot(weights, basis, axes=1)
    prototypes /= prototypes.max(axis=(1, 2), keepdims=True)

    labels = rng.permutation(np.arange(n) % num_classes)
    feats = prototypes[labels]

    n_amb = int(round(ambiguous_frac * n))
    if n_amb and num_classes > 1:
        amb_idx = rng.choice(n, size=n_amb, replace=False)
        other = (labels[amb_idx] + rng.integers(1, num_classes, size=n_amb)) % num_classes
        mix = rng.uniform(0.40, 0.48, size=n_amb)[:, None, None]
        feats[amb_idx] = (1 - mix) * feats[amb_idx] + mix * prototypes[other]

    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    brightness = rng.uniform(0.75, 1.15, size=n)
    shifted = np.empty_like(feats)
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            mask = (shifts[:, 0] == dy) & (shifts[:, 1] == dx)
            if mask.any():
                shifted[mask] = np.roll(feats[mask], (dy, dx), axis=(1, 2))
    feats = shifted * brightness[:, None, None]
    feats += rng.normal(0.0, noise, size=feats.shape)
    feats = np.clip(feats, 0.0, 1.0)
    return Dataset(feats[:, None, :, :], labels, num_classes, "synthetic-images")


def gen_toy_memorization(n: int = 600, num_classes: int = 3, seed: int = 0) -> Dataset:
    """Identity-coded toy set: sample i is the i-th unit vector, label arbitrary.

    There is nothing to generalize from, so any trained model memorizes its
    training rows and is clueless elsewhere; membership is perfectly exposed.
    """
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    return Dataset(np.eye(n), labels, num_classes, "toy-memorize")


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def split_disjoint(ds: Dataset, spec: SplitSpec) -> SplitIndices:
    """Stratified disjoint partition into target-train / shadow-train / test.

    Split sizes are met exactly; each split's per-class proportions track the
    full dataset's (largest-remainder apportionment per class). Deterministic
    for a given spec.seed.
    """
    n = len(ds)
    if spec.total > n:
        raise ValueError(f"split sizes sum to {spec.total} but dataset has {n} records")
    rng = np.random.default_rng(spec.seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)]
    for idx in by_class:
        rng.shuffle(idx)
    counts = np.array([len(ix) for ix in by_class], dtype=np.int64)
    remaining = counts.copy()
    cursor = np.zeros(ds.num_classes, dtype=np.int64)

    parts = []
    for size in (spec.target_train_size, spec.shadow_train_size, spec.test_size):
        exact = size * counts / n
        quota = np.minimum(np.floor(exact).astype(np.int64), remaining)
        frac = exact - quota
        short = size - quota.sum()
        while short > 0:  # top up by largest remainder among classes with room
            room = remaining - quota
            c = int(np.argmax(np.where(room > 0, frac, -np.inf)))
            quota[c] += 1
            frac[c] -= 1.0
            short -= 1
        part = np.concatenate(
            [by_class[c][cursor[c]:cursor[c] + quota[c]] for c in range(ds.num_classes)]
        )
        cursor += quota
        remaining -= quota
        rng.shuffle(part)
        parts.append(part)
    return SplitIndices(*parts)


def remove_class(ds: Dataset, indices: np.ndarray, class_id: int) -> np.ndarray:
    """Drop every index whose sample is labeled class_id, preserving order."""
    if not 0 <= class_id < ds.num_classes:
        raise ValueError(f"class_id {class_id} out of range")
    indices = np.asarray(indices)
    return indices[ds.labels[indices] != class_id]


def batches(ds: Dataset, indices: np.ndarray, batch_size: int, shuffle_seed: int):
    """Yield (features, labels) minibatches covering each index exactly once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    indices = np.asarray(indices)
    order = np.random.default_rng(shuffle_seed).permutation(len(indices))
    shuffled = indices[order]
    for start in range(0, len(shuffled), batch_size):
        chunk = shuffled[start:start + batch_size]
        yield ds.features[chunk], ds.labels[chunk]


# ---------------------------------------------------------------------------
# On-disk containers
#   dataset: magic "LLDATA1\0" | u32 num_classes | u32 name len | name utf8
#            | u32 rank | u32 dims... | u32 labels... | raw LE f64 features
#   split:   magic "LLSPLT1\0" | 3 x (u32 count | u32 indices...)
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    name = ds.name.encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", ds.num_classes, len(name)))
        f.write(name)
        f.write(struct.pack("<I", ds.features.ndim))
        f.write(struct.pack(f"<{ds.features.ndim}I", *ds.features.shape))
        f.write(ds.labels.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != DATASET_MAGIC:
        raise ValueError(f"bad magic in {path}: not a dataset container")
    pos = 8
    num_classes, name_len = struct.unpack("<II", data[pos:pos + 8]); pos += 8
    name = data[pos:pos + name_len].decode("utf-8"); pos += name_len
    rank = struct.unpack("<I", data[pos:pos + 4])[0]; pos += 4
    dims = struct.unpack(f"<{rank}I", data[pos:pos + 4 * rank]); pos += 4 * rank
    n = dims[0]
    labels = np.frombuffer(data[pos:pos + 4 * n], dtype="<u4").astype(np.int64); pos += 4 * n
    count = int(np.prod(dims))
    feats = np.frombuffer(data[pos:pos + 8 * count], dtype="<f8").reshape(dims).copy()
    pos += 8 * count
    if pos != len(data):
        raise ValueError(f"trailing bytes in dataset container {path}")
    return Dataset(feats, labels, num_classes, name)


def save_split(split: SplitIndices, path) -> None:
    with open(path, "wb") as f:
        f.write(SPLIT_MAGIC)
        for part in split.parts():
            f.write(struct.pack("<I", len(part)))
            f.write(np.asarray(part, dtype="<u4").tobytes())


def load_split(path) -> SplitIndices:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != SPLIT_MAGIC:
        raise ValueError(f"bad magic in {path}: not a split file")
    pos = 8
    parts = []
    for _ in range(3):
        count = struct.unpack("<I", data[pos:pos + 4])[0]; pos += 4
        parts.append(np.frombuffer(data[pos:pos + 4 * count], dtype="<u4").astype(np.int64))
        pos += 4 * count
    if pos != len(data):
        raise ValueError(f"trailing bytes in split file {path}")
    return SplitIndices(*parts)
