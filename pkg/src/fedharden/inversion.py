"""Universal trigger inversion, class-distance cache with warm-up,
promising/fragile pair selection, and (a)symmetric hardening-data generation.

The inversion optimizes a sigmoid-reparameterized (mask, pattern) pair with
Adam, minimizing  CE(model((1-m)*x + m*p), target) + mask_weight * ||m||_1.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, TriggerSpec, stamp
from .model import LinearModel
from .numerics import SeededRng, softmax

_SQUASH_EPS = 1e-6


class InsufficientDataError(ValueError):
    """Shard lacks the samples required for the requested inversion."""


@dataclass
class InversionConfig:
    max_steps: int = 100
    step_size: float = 0.1
    mask_weight: float = 1e-3
    pairs_per_round: int = 3
    min_class_samples: int = 5      # "sufficient data" threshold, strict >
    max_source_samples: int = 32    # per-direction cap for pair inversions
    universal_source_samples: int = 96
    trigger_size_limit: float | None = None  # hardening filter, fraction of d
    init_mask_scale: float = 0.02

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")

    def size_limit(self, dim: int) -> float:
        return float("inf") if self.trigger_size_limit is None else self.trigger_size_limit * dim


@dataclass
class InversionResult:
    trigger: TriggerSpec
    loss_trace: np.ndarray              # per-step objective value
    class_traces: dict[int, np.ndarray]  # source class -> per-step mean CE


@dataclass
class DistanceMatrix:
    """I x I class-distance cache; unset entries are explicit (never 0)."""

    num_classes: int
    entries: np.ndarray = field(init=False)
    freshness: np.ndarray = field(init=False)

    def __post_init__(self):
        self.entries = np.full((self.num_classes, self.num_classes), np.nan)
        self.freshness = np.full((self.num_classes, self.num_classes), -1, dtype=np.int64)

    def is_set(self, source: int, target: int) -> bool:
        return not np.isnan(self.entries[source, target])

    def get(self, source: int, target: int) -> float | None:
        v = self.entries[source, target]
        return None if np.isnan(v) else float(v)

    def set(self, source: int, target: int, value: float, round_index: int) -> None:
        if source == target:
            raise ValueError("diagonal entries are unused (source != target)")
        if value < 0:
            raise ValueError("distances are non-negative")
        self.entries[source, target] = value
        self.freshness[source, target] = round_index

    def set_pairs(self) -> list[tuple[int, int]]:
        out = []
        for s in range(self.num_classes):
            for t in range(self.num_classes):
                if s != t and self.is_set(s, t):
                    out.append((s, t))
        return out


class _Adam:
    """Minimal Adam (Neural-Cleanse-style betas) for the squashed variables."""

    def __init__(self, dim: int, lr: float, b1: float = 0.5, b2: float = 0.9):
        self.lr, self.b1, self.b2 = lr, b1, b2
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return x - self.lr * mh / (np.sqrt(vh) + 1e-8)


def _logit(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, _SQUASH_EPS, 1 - _SQUASH_EPS)
    return np.log(u / (1 - u))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _init_vars(cfg: InversionConfig, dim: int, rng: SeededRng,
               init: TriggerSpec | None) -> tuple[np.ndarray, np.ndarray]:
    if init is not None:
        return _logit(init.mask), _logit(init.pattern)
    return _logit(rng.random(dim) * cfg.init_mask_scale), _logit(rng.random(dim))


def invert_trigger(model: LinearModel, sources: np.ndarray, source_labels: np.ndarray,
                   target: int, cfg: InversionConfig, rng: SeededRng,
                   init: TriggerSpec | None = None) -> InversionResult:
    """Universal trigger inversion toward `target` over the given source samples.

    Gradient descent runs on unconstrained reparameterizations of (mask,
    pattern); the returned trigger lies in [0,1]^d by construction. The loss
    trace records the per-step objective; per-source-class CE traces feed the
    warm-up distance approximation.
    """
    xs = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    ys = np.asarray(source_labels, dtype=np.int64)
    if len(xs) == 0:
        raise InsufficientDataError("no source samples for inversion")
    if np.any(ys == target):
        raise ValueError("source samples must not carry the target label")
    dim = xs.shape[1]
    a, c = _init_vars(cfg, dim, rng, init)
    opt_a = _Adam(dim, cfg.step_size)
    opt_c = _Adam(dim, cfg.step_size)

    n = len(xs)
    trace = np.empty(cfg.max_steps)
    per_class_steps: dict[int, list[float]] = {int(s): [] for s in np.unique(ys)}
    for step in range(cfg.max_steps):
        m = _sigmoid(a)
        p = _sigmoid(c)
        stamped = (1.0 - m) * xs + m * p
        probs = softmax(model.logits(stamped))
        ce = -np.log(np.clip(probs[:, target], 1e-12, None))
        trace[step] = float(ce.mean() + cfg.mask_weight * np.abs(m).sum())
        for s, vals in per_class_steps.items():
            vals.append(float(ce[ys == s].mean()))
        # dCE/d stamped, averaged over the batch
        g_logits = probs
        g_logits[np.arange(n), target] -= 1.0
        d_stamped = (g_logits @ model.weights.T) / n
        g_mask = (d_stamped * (p - xs)).sum(axis=0) + cfg.mask_weight
        g_pat = (d_stamped * m).sum(axis=0)
        a = opt_a.step(a, g_mask * m * (1 - m))
        c = opt_c.step(c, g_pat * p * (1 - p))

    trig = TriggerSpec(mask=_sigmoid(a), pattern=_sigmoid(c), target_label=target)
    return InversionResult(trig, trace,
                           {s: np.asarray(v) for s, v in per_class_steps.items()})


def class_distance(trig: TriggerSpec) -> float:
    """L1 norm (absolute value sum) of the trigger mask."""
    return float(np.abs(trig.mask).sum())


def warmup_distances(model: LinearModel, shard: LabeledDataset, cfg: InversionConfig,
                     rng: SeededRng) -> DistanceMatrix:
    """One universal inversion per target class present in the shard.

    The approximate distance for (source, target) is the universal trigger's
    mask norm scaled by the source class's per-step loss variance rank, so
    warm-up entries are commensurable with the exact L1 values that later
    overwrite them while preserving the far-pairs-vary-more ordering.
    """
    if len(shard) == 0:
        raise InsufficientDataError("empty shard")
    dm = DistanceMatrix(shard.num_classes)
    present = set(int(c) for c in np.unique(shard.labels))
    for t in sorted(present):
        src_idx = np.where(shard.labels != t)[0]
        if len(src_idx) == 0 or not (present - {t}):
            continue
        take = min(cfg.universal_source_samples, len(src_idx))
        sub = rng.choice(src_idx, size=take, replace=False)
        res = invert_trigger(model, shard.images[sub], shard.labels[sub], t, cfg,
                             rng.child(7001, t))
        uni_norm = class_distance(res.trigger)
        variances = {s: float(tr.var()) for s, tr in res.class_traces.items()}
        vmax = max(variances.values()) or 1.0
        for s, v in variances.items():
            dm.set(s, t, uni_norm * (1.0 + 0.1 * v / vmax), round_index=0)
    return dm


def _ranked_pairs(dm: DistanceMatrix) -> list[tuple[float, int, int]]:
    return sorted(((dm.entries[s, t], s, t) for (s, t) in dm.set_pairs()),
                  key=lambda z: (-z[0], z[1], z[2]))


def select_pairs(dm: DistanceMatrix, k: int) -> list[tuple[int, int]]:
    """The k set pairs with the largest distances; ties break lexicographically."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return [(s, t) for _, s, t in _ranked_pairs(dm)[:k]]


def select_fragile_pairs(dm: DistanceMatrix, k: int) -> list[tuple[int, int]]:
    """The k set pairs with the smallest distances (suspected backdoor routes)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(((dm.entries[s, t], s, t) for (s, t) in dm.set_pairs()),
                    key=lambda z: (z[0], z[1], z[2]))
    return [(s, t) for _, s, t in ranked[:k]]


def _class_indices(shard: LabeledDataset, label: int, cap: int, rng: SeededRng) -> np.ndarray:
    idx = np.where(shard.labels == label)[0]
    if len(idx) > cap:
        idx = rng.choice(idx, size=cap, replace=False)
    return idx


def symmetric_invert(model: LinearModel, shard: LabeledDataset, pair: tuple[int, int],
                     cfg: InversionConfig, rng: SeededRng, dm: DistanceMatrix,
                     round_index: int,
                     inits: tuple[TriggerSpec | None, TriggerSpec | None] = (None, None),
                     ) -> tuple[np.ndarray, np.ndarray, tuple[TriggerSpec, TriggerSpec]]:
    """Joint two-direction inversion for (a, b) with indicator routing.

    Returns stamped samples paired with their original labels plus both
    recovered triggers; both distance entries are refreshed with exact L1
    norms.
    """
    a_label, b_label = pair
    counts = shard.class_counts()
    if counts[a_label] <= cfg.min_class_samples or counts[b_label] <= cfg.min_class_samples:
        raise InsufficientDataError(
            f"symmetric inversion needs > {cfg.min_class_samples} samples for both classes")

    ia = _class_indices(shard, a_label, cfg.max_source_samples, rng.child(11, a_label))
    ib = _class_indices(shard, b_label, cfg.max_source_samples, rng.child(11, b_label))
    xs = np.vstack([shard.images[ia], shard.images[ib]])
    routing = np.zeros(len(xs))
    routing[: len(ia)] = 1.0  # 1 -> direction a->b, 0 -> direction b->a
    flip_targets = np.concatenate([np.full(len(ia), b_label), np.full(len(ib), a_label)])

    dim = shard.dim
    a0, c0 = _init_vars(cfg, dim, rng.child(13, a_label, b_label), inits[0])
    a1, c1 = _init_vars(cfg, dim, rng.child(17, a_label, b_label), inits[1])
    vars_ = [a0, a1]
    pats = [c0, c1]
    opts = [[_Adam(dim, cfg.step_size) for _ in range(2)] for _ in range(2)]

    n = len(xs)
    route = routing[:, None]
    for _ in range(cfg.max_steps):
        m0, m1 = _sigmoid(vars_[0]), _sigmoid(vars_[1])
        p0, p1 = _sigmoid(pats[0]), _sigmoid(pats[1])
        stamped = route * ((1 - m0) * xs + m0 * p0) + (1 - route) * ((1 - m1) * xs + m1 * p1)
        probs = softmax(model.logits(stamped))
        g_logits = probs
        g_logits[np.arange(n), flip_targets] -= 1.0
        d_stamped = (g_logits @ model.weights.T) / n
        d0 = d_stamped * route
        d1 = d_stamped * (1 - route)
        g_m0 = (d0 * (p0 - xs)).sum(axis=0) + cfg.mask_weight
        g_m1 = (d1 * (p1 - xs)).sum(axis=0) + cfg.mask_weight
        g_p0 = (d0 * m0).sum(axis=0)
        g_p1 = (d1 * m1).sum(axis=0)
        vars_[0] = opts[0][0].step(vars_[0], g_m0 * m0 * (1 - m0))
        vars_[1] = opts[1][0].step(vars_[1], g_m1 * m1 * (1 - m1))
        pats[0] = opts[0][1].step(pats[0], g_p0 * p0 * (1 - p0))
        pats[1] = opts[1][1].step(pats[1], g_p1 * p1 * (1 - p1))

    trig_ab = TriggerSpec(_sigmoid(vars_[0]), _sigmoid(pats[0]), target_label=b_label)
    trig_ba = TriggerSpec(_sigmoid(vars_[1]), _sigmoid(pats[1]), target_label=a_label)
    dm.set(a_label, b_label, class_distance(trig_ab), round_index)
    dm.set(b_label, a_label, class_distance(trig_ba), round_index)

    aug_inputs = np.vstack([stamp(shard.images[ia], trig_ab),
                            stamp(shard.images[ib], trig_ba)])
    aug_labels = np.concatenate([np.full(len(ia), a_label), np.full(len(ib), b_label)])
    return aug_inputs, aug_labels, (trig_ab, trig_ba)


def asymmetric_invert(model: LinearModel, shard: LabeledDataset, pair: tuple[int, int],
                      cfg: InversionConfig, rng: SeededRng, dm: DistanceMatrix,
                      round_index: int, init: TriggerSpec | None = None,
                      ) -> tuple[np.ndarray, np.ndarray, TriggerSpec]:
    """Single-direction inversion a->b; one distance entry is refreshed."""
    a_label, b_label = pair
    if shard.class_counts()[a_label] <= cfg.min_class_samples:
        raise InsufficientDataError(
            f"asymmetric inversion needs > {cfg.min_class_samples} source samples")
    ia = _class_indices(shard, a_label, cfg.max_source_samples, rng.child(11, a_label))
    res = invert_trigger(model, shard.images[ia], shard.labels[ia], b_label, cfg,
                         rng.child(19, a_label, b_label), init=init)
    dm.set(a_label, b_label, class_distance(res.trigger), round_index)
    aug_inputs = stamp(shard.images[ia], res.trigger)
    return aug_inputs, np.full(len(ia), a_label), res.trigger


def save_trigger(trig: TriggerSpec, path: str) -> None:
    """(mask, pattern) flat file in the model-checkpoint container style."""
    with open(path, "wb") as f:
        f.write(b"TRIG")
        f.write(struct.pack(">IIi", 1, trig.dim, trig.target_label))
        f.write(trig.mask.astype(">f8").tobytes())
        f.write(trig.pattern.astype(">f8").tobytes())


def load_trigger(path: str) -> TriggerSpec:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != b"TRIG":
        raise ValueError(f"{path}: not a trigger file")
    _version, dim, target = struct.unpack(">IIi", buf[4:16])
    mask = np.frombuffer(buf, dtype=">f8", count=dim, offset=16).astype(np.float64)
    pattern = np.frombuffer(buf, dtype=">f8", count=dim, offset=16 + dim * 8).astype(np.float64)
    return TriggerSpec(np.clip(mask, 0, 1), np.clip(pattern, 0, 1), target)


def trigger_to_pgm(trig: TriggerSpec, width: int, height: int, path_prefix: str) -> None:
    """Dump mask and pattern as binary PGM images for visual inspection."""
    for tag, vec in (("mask", trig.mask), ("pattern", trig.pattern)):
        img = np.rint(np.clip(vec, 0, 1).reshape(height, width) * 255).astype(np.uint8)
        with open(f"{path_prefix}_{tag}.pgm", "wb") as f:
            f.write(f"P5\n{width} {height}\n255\n".encode())
            f.write(img.tobytes())
