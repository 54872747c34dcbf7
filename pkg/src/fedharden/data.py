"""Dataset ingestion (IDX files, synthetic blobs, bundled digits), non-i.i.d.
partitioning, trigger stamping, and poison-batch construction."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError, SeededRng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncation, or count disagreement)."""


@dataclass
class LabeledDataset:
    """Flattened images in [0,1]^d with integer class labels."""

    images: np.ndarray  # (n, d) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, num_classes)
    width: int
    height: int
    channels: int = 1
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise ValueError("images must be (n, d)")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels length mismatch")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        if self.images.shape[1] != self.width * self.height * self.channels:
            raise ValueError("image dimension does not match geometry")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx],
                              self.width, self.height, self.channels, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class TriggerSpec:
    """Blend trigger: x' = (1 - mask) * x + mask * pattern, target label t."""

    mask: np.ndarray
    pattern: np.ndarray
    target_label: int

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        if self.mask.shape != self.pattern.shape or self.mask.ndim != 1:
            raise ValueError("mask and pattern must be equal-length vectors")
        for name, v in (("mask", self.mask), ("pattern", self.pattern)):
            if v.size and (v.min() < -1e-12 or v.max() > 1 + 1e-12):
                raise ValueError(f"{name} entries must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.mask.shape[0]

    def additive(self) -> np.ndarray:
        """Trigger as an additive vector (exact on pixels where the image is 0)."""
        return self.mask * self.pattern


@dataclass
class PartitionPlan:
    assignment: np.ndarray  # (n,) client index per sample
    dirichlet_alpha: float
    num_clients: int

    def shard_indices(self, client: int) -> np.ndarray:
        return np.where(self.assignment == client)[0]

    def shard_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_clients)


def _read_be32(buf: bytes, off: int, path: str) -> int:
    if off + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated header")
    return struct.unpack(">I", buf[off:off + 4])[0]


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> LabeledDataset:
    """Load an IDX image/label file pair (big-endian, raw unsigned bytes)."""
    with open(images_path, "rb") as f:
        ibuf = f.read()
    with open(labels_path, "rb") as f:
        lbuf = f.read()

    magic = _read_be32(ibuf, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    n = _read_be32(ibuf, 4, images_path)
    rows = _read_be32(ibuf, 8, images_path)
    cols = _read_be32(ibuf, 12, images_path)
    if len(ibuf) != 16 + n * rows * cols:
        raise IdxFormatError(f"{images_path}: expected {16 + n * rows * cols} bytes, got {len(ibuf)}")

    lmagic = _read_be32(lbuf, 0, labels_path)
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    ln = _read_be32(lbuf, 4, labels_path)
    if len(lbuf) != 8 + ln:
        raise IdxFormatError(f"{labels_path}: expected {8 + ln} bytes, got {len(lbuf)}")
    if n != ln:
        raise IdxFormatError(f"image count {n} != label count {ln}")

    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledDataset(pixels.astype(np.float64) / 255.0, labels,
                          width=cols, height=rows, num_classes=num_classes)


def write_idx(ds: LabeledDataset, images_path: str, labels_path: str) -> None:
    """Serialize back to the IDX byte layout (inverse of load_idx)."""
    n = len(ds)
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, ds.height, ds.width))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def gen_synthetic(num_classes: int, dim: int, per_class: int, rng: SeededRng,
                  noise: float = 0.08, width: int | None = None,
                  height: int | None = None, border: int = 0) -> LabeledDataset:
    """Gaussian class blobs clipped to [0,1]; linearly separable for spread means.

    A positive `border` zeroes that many pixels around the image edge (image
    geometries only), mimicking the dead margins of handwritten-digit data.
    """
    if dim < 4:
        raise ValueError("dim must be >= 4")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if width is None or height is None:
        width, height = dim, 1
    if width * height != dim:
        raise ValueError("width*height must equal dim")
    if border and 2 * border >= min(width, height):
        raise ValueError("border leaves no active pixels")
    means = 0.25 + 0.5 * rng.random((num_classes, dim))
    images = np.empty((num_classes * per_class, dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        lo, hi = c * per_class, (c + 1) * per_class
        images[lo:hi] = means[c] + rng.normal(0.0, noise, (per_class, dim))
        labels[lo:hi] = c
    if border:
        dead = np.ones((height, width), dtype=bool)
        dead[border:height - border, border:width - border] = False
        images[:, dead.ravel()] = 0.0
    perm = rng.permutation(len(images))
    return LabeledDataset(np.clip(images[perm], 0.0, 1.0), labels[perm],
                          width=width, height=height, num_classes=num_classes)


def dirichlet_partition(ds: LabeledDataset, num_clients: int, alpha: float,
                        rng: SeededRng) -> PartitionPlan:
    """Class-wise Dirichlet(alpha) split; every sample assigned exactly once.

    Empty shards are permitted: extreme skew is part of the non-i.i.d. model.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    assignment = np.empty(len(ds), dtype=np.int64)
    for c in range(ds.num_classes):
        idx = np.where(ds.labels == c)[0]
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        # cumulative split points guarantee an exact cover
        cuts = np.floor(np.cumsum(props) * len(idx)).astype(np.int64)
        cuts[-1] = len(idx)
        start = 0
        for k in range(num_clients):
            assignment[idx[start:cuts[k]]] = k
            start = cuts[k]
    return PartitionPlan(assignment, dirichlet_alpha=alpha, num_clients=num_clients)


def sized_partition(ds: LabeledDataset, fractions, rng: SeededRng) -> PartitionPlan:
    """Random class-balanced split into shards of the given size fractions."""
    fr = np.asarray(fractions, dtype=np.float64)
    if abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    assignment = np.empty(len(ds), dtype=np.int64)
    for c in range(ds.num_classes):
        idx = np.where(ds.labels == c)[0]
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        cuts = np.floor(np.cumsum(fr) * len(idx)).astype(np.int64)
        cuts[-1] = len(idx)
        start = 0
        for k in range(len(fr)):
            assignment[idx[start:cuts[k]]] = k
            start = cuts[k]
    return PartitionPlan(assignment, dirichlet_alpha=float("inf"), num_clients=len(fr))


def stamp(x: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    """Apply the blend trigger to one sample or a batch of samples."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != trig.dim:
        raise NumericsError(f"stamp dimension mismatch: {x.shape[-1]} vs {trig.dim}")
    return (1.0 - trig.mask) * x + trig.mask * trig.pattern


def square_patch_trigger(width: int, height: int, side: int, target_label: int,
                         corner: str = "top_left", value: float = 1.0,
                         inset: int = 0) -> TriggerSpec:
    """Solid square patch of the given side at a corner (optionally inset)."""
    if side < 1 or side + inset > min(width, height):
        raise ValueError("patch does not fit the image")
    mask2d = np.zeros((height, width))
    r0 = inset if corner.startswith("top") else height - inset - side
    c0 = inset if corner.endswith("left") else width - inset - side
    mask2d[r0:r0 + side, c0:c0 + side] = 1.0
    mask = mask2d.ravel()
    return TriggerSpec(mask=mask, pattern=np.full(width * height, float(value)),
                       target_label=target_label)


def make_poison_batch(shard: LabeledDataset, trig: TriggerSpec, batch_size: int,
                      poison_count: int, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    """Batch of `batch_size` samples drawn with replacement; the first
    `poison_count` are stamped and relabeled to the trigger target."""
    if len(shard) == 0:
        raise ValueError("empty shard")
    if poison_count > batch_size:
        raise ValueError("poison_count exceeds batch_size")
    idx = rng.integers(0, len(shard), size=batch_size)
    xs = shard.images[idx].copy()
    ys = shard.labels[idx].copy()
    if poison_count:
        xs[:poison_count] = stamp(xs[:poison_count], trig)
        ys[:poison_count] = trig.target_label
    return xs, ys


def load_digits_upscaled(test_fraction: float = 0.2, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Bundled scikit-learn handwritten digits, nearest-neighbor upscaled to
    28x28 (3x + 2px border) so MNIST-geometry configs apply unchanged.

    Returns (train, test) with a seeded shuffle split.
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = np.kron(raw.images / 16.0, np.ones((3, 3)))
    imgs = np.pad(imgs, ((0, 0), (2, 2), (2, 2)))
    flat = np.clip(imgs.reshape(len(imgs), -1), 0.0, 1.0)
    labels = raw.target.astype(np.int64)
    rng = SeededRng(seed, (90,))
    perm = rng.permutation(len(flat))
    flat, labels = flat[perm], labels[perm]
    n_test = int(round(len(flat) * test_fraction))
    mk = lambda s: LabeledDataset(flat[s], labels[s], width=28, height=28, num_classes=10)
    return mk(slice(n_test, None)), mk(slice(0, n_test))
