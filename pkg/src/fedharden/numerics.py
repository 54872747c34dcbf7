"""Dense numeric kernels, stable softmax/cross-entropy, and seeded randomness.

All arrays are float64 numpy arrays: matrices row-major (rows, cols), vectors
1-D. Every public routine validates finiteness/shapes up front so the higher
layers can assume clean inputs.
"""
from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


class NumericsError(ValueError):
    """Invalid argument (non-finite input or shape mismatch)."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise NumericsError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if rows is not None and a.shape[0] != rows:
        raise NumericsError(f"expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise NumericsError(f"expected {cols} cols, got {a.shape[1]}")
    require_finite(a, "matrix")
    return a


def as_vector(data, length: int | None = None) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 1:
        raise NumericsError(f"expected a 1-D vector, got ndim={a.ndim}")
    if length is not None and a.shape[0] != length:
        raise NumericsError(f"expected length {length}, got {a.shape[0]}")
    require_finite(a, "vector")
    return a


def require_finite(a: np.ndarray, what: str = "array") -> None:
    if not np.isfinite(a).all():
        raise NumericsError(f"{what} contains non-finite entries")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (max-subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    require_finite(z, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """-sum(q_i * ln p_i), with probabilities floored at PROB_FLOOR."""
    p = as_vector(probs)
    q = as_vector(onehot, length=p.shape[0])
    return float(-(q * np.log(np.clip(p, PROB_FLOOR, None))).sum())


def cross_entropy_rows(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row -ln p[label] for a (n, I) probability matrix."""
    p = np.asarray(probs, dtype=np.float64)
    idx = np.asarray(labels)
    picked = p[np.arange(p.shape[0]), idx]
    return -np.log(np.clip(picked, PROB_FLOOR, None))


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    m = as_matrix(m)
    v = as_vector(v, length=m.shape[1])
    return m @ v


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b, rows=a.shape[1])
    return a @ b


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise NumericsError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    require_finite(x, "x")
    require_finite(y, "y")
    return alpha * x + y


def one_hot(index: int, num_classes: int) -> np.ndarray:
    if not 0 <= index < num_classes:
        raise NumericsError(f"one_hot index {index} out of range [0, {num_classes})")
    q = np.zeros(num_classes)
    q[index] = 1.0
    return q


class SeededRng:
    """Deterministic RNG tree over the Philox counter-based generator.

    Children are derived from (seed, key path) alone, so streams do not
    depend on draw order elsewhere: ``rng.child(round, client)`` is the same
    stream no matter when it is created.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        seq = np.random.SeedSequence((self.seed,) + self.key)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *tags: int) -> "SeededRng":
        return SeededRng(self.seed, self.key + tags)

    # thin passthroughs used across the codebase
    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high=high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def dirichlet(self, alpha):
        return self.generator.dirichlet(alpha)

    def permutation(self, x):
        return self.generator.permutation(x)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)
