"""Multinomial logistic regression: one linear layer, softmax, cross-entropy,
exact analytic gradients, and SGD."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .numerics import NumericsError, SeededRng, require_finite, softmax

CHECKPOINT_MAGIC = b"LMCK"
CHECKPOINT_VERSION = 1


@dataclass
class LinearModel:
    """weights (d, I) and optional bias (I,); logits are x @ W + b."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise NumericsError("weights must be (d, num_classes)")
        require_finite(self.weights, "weights")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[1],):
                raise NumericsError("bias length must equal num_classes")
            require_finite(self.bias, "bias")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearModel":
        return LinearModel(self.weights.copy(),
                           None if self.bias is None else self.bias.copy())

    def logits(self, x: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(x, dtype=np.float64)) @ self.weights
        if self.bias is not None:
            z = z + self.bias
        return z

    def flat(self) -> np.ndarray:
        parts = [self.weights.ravel()]
        if self.bias is not None:
            parts.append(self.bias)
        return np.concatenate(parts)


@dataclass
class SgdConfig:
    learning_rate: float = 0.1
    batch_size: int = 64
    epochs: int = 5
    mean_gradients: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def zeros_model(dim: int, num_classes: int, bias: bool = True) -> LinearModel:
    return LinearModel(np.zeros((dim, num_classes)),
                       np.zeros(num_classes) if bias else None)


def gaussian_model(dim: int, num_classes: int, rng: SeededRng, sigma: float = 0.01,
                   bias: bool = True) -> LinearModel:
    return LinearModel(rng.normal(0.0, sigma, (dim, num_classes)),
                       np.zeros(num_classes) if bias else None)


def forward_probs(model: LinearModel, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for one sample (1-D) or a batch (2-D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise NumericsError(f"input dim {x.shape[-1]} != model dim {model.dim}")
    p = softmax(model.logits(x))
    return p[0] if x.ndim == 1 else p


def gradient(model: LinearModel, inputs: np.ndarray, labels: np.ndarray,
             mean: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy gradient over a batch.

    Returns (gradW, gradB) where gradW = sum_j x_j^T (p(x_j) - Y_j); `mean`
    divides by the batch size for conventional mini-batch training.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty batch")
    p = softmax(model.logits(x))
    p[np.arange(len(y)), y] -= 1.0
    grad_w = x.T @ p
    grad_b = p.sum(axis=0)
    if mean:
        grad_w /= len(y)
        grad_b /= len(y)
    return grad_w, grad_b


def sgd_step(model: LinearModel, grad_w: np.ndarray, grad_b: np.ndarray | None,
             learning_rate: float) -> LinearModel:
    """Functional update W <- W - lr * grad (input model left unmodified)."""
    if grad_w.shape != model.weights.shape:
        raise NumericsError("gradient shape mismatch")
    new_w = model.weights - learning_rate * grad_w
    new_b = None
    if model.bias is not None:
        new_b = model.bias - learning_rate * (grad_b if grad_b is not None else 0.0)
    return LinearModel(new_w, new_b)


def train_sgd(model: LinearModel, inputs: np.ndarray, labels: np.ndarray,
              cfg: SgdConfig, rng: SeededRng,
              extra: tuple[np.ndarray, np.ndarray] | None = None,
              extra_per_batch: int = 64) -> LinearModel:
    """Mini-batch SGD over the given samples for cfg.epochs.

    When `extra` (augmented inputs, labels) is provided, every batch is
    extended with up to `extra_per_batch` rows drawn from the pool with
    replacement.
    """
    w = model.weights.copy()
    b = None if model.bias is None else model.bias.copy()
    n = len(inputs)
    if n == 0:
        return model.copy()
    cur = LinearModel(w, b)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            bx, by = inputs[idx], labels[idx]
            if extra is not None and len(extra[0]):
                take = min(extra_per_batch, len(extra[0]))
                ai = rng.integers(0, len(extra[0]), size=take)
                bx = np.vstack([bx, extra[0][ai]])
                by = np.concatenate([by, extra[1][ai]])
            gw, gb = gradient(cur, bx, by, mean=cfg.mean_gradients)
            if cfg.weight_decay:
                gw = gw + cfg.weight_decay * cur.weights
            cur = sgd_step(cur, gw, gb, cfg.learning_rate)
    return cur


def evaluate_accuracy(model: LinearModel, ds: LabeledDataset) -> float:
    """Fraction with argmax probability equal to the label (ties -> lowest index)."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    pred = forward_probs(model, ds.images).argmax(axis=1)
    return float((pred == ds.labels).mean())


def save_checkpoint(model: LinearModel, path: str) -> None:
    """Binary container: magic, version, d, I, has_bias, then row-major
    float64 weights (and bias). Layout is stable across versions."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(">IIIB", CHECKPOINT_VERSION, model.dim,
                            model.num_classes, 1 if model.bias is not None else 0))
        f.write(model.weights.astype(">f8").tobytes())
        if model.bias is not None:
            f.write(model.bias.astype(">f8").tobytes())


def load_checkpoint(path: str) -> LinearModel:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, dim, classes, has_bias = struct.unpack(">IIIB", buf[4:17])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 17
    w = np.frombuffer(buf, dtype=">f8", count=dim * classes, offset=off)
    w = w.reshape(dim, classes).astype(np.float64)
    bias = None
    if has_bias:
        off += dim * classes * 8
        bias = np.frombuffer(buf, dtype=">f8", count=classes, offset=off).astype(np.float64)
    return LinearModel(w, bias)
