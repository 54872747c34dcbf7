"""FedAvg round loop: client selection, benign hardening updates, malicious
poison updates (continuous / single-shot / adaptive, optional weight scaling),
and global aggregation including robust baselines."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, TriggerSpec, make_poison_batch, stamp
from .guard import MetricSet, compute_metrics
from .inversion import (DistanceMatrix, InsufficientDataError, InversionConfig,
                        asymmetric_invert, class_distance, invert_trigger,
                        select_fragile_pairs, select_pairs, symmetric_invert,
                        warmup_distances)
from .model import LinearModel, SgdConfig, train_sgd
from .numerics import SeededRng

BENIGN = "benign"
MALICIOUS = "malicious"


@dataclass
class ClientState:
    id: int
    role: str
    shard: LabeledDataset
    distance_cache: DistanceMatrix | None = None
    trigger_cache: dict = field(default_factory=dict)
    selected_before: bool = False
    sgd: SgdConfig | None = None  # per-client override of the federation defaults


@dataclass
class FederationConfig:
    num_clients: int = 100
    clients_per_round: int = 10
    num_adversaries: int = 4
    total_rounds: int = 100
    attack_mode: str = "continuous"  # none | single_shot | continuous | adaptive
    attack_start_round: int = 30
    scale_factor: float = 1.0
    aggregator: str = "fedavg"  # fedavg | sum | krum | multikrum | median | trimmed_mean
    krum_f: int | None = None
    multikrum_m: int = 1
    trim_beta: int = 1
    defense: str = "none"  # none | flip
    defense_start_round: int | None = None
    benign_lr: float = 0.1
    poison_lr: float = 0.05
    batch_size: int = 64
    epochs: int = 5
    poison_count: int = 20
    augment_per_batch: int = 64
    mean_gradients: bool = True
    weight_decay: float = 0.0
    tau: float = 0.3
    threads: int = 1

    def __post_init__(self):
        if self.clients_per_round > self.num_clients:
            raise ValueError("clients_per_round exceeds num_clients")
        if self.num_adversaries > self.clients_per_round:
            raise ValueError("num_adversaries exceeds clients_per_round")
        if self.scale_factor < 1.0:
            raise ValueError("scale_factor must be >= 1")
        if self.attack_mode not in ("none", "single_shot", "continuous", "adaptive"):
            raise ValueError(f"unknown attack_mode {self.attack_mode!r}")
        if self.defense not in ("none", "flip"):
            raise ValueError(f"unknown defense {self.defense!r}")

    def attack_active(self, round_index: int) -> bool:
        if self.attack_mode == "none":
            return False
        if self.attack_mode == "single_shot":
            return round_index == self.attack_start_round
        return round_index >= self.attack_start_round

    def defense_active(self, round_index: int) -> bool:
        if self.defense != "flip":
            return False
        start = self.defense_start_round
        if start is None:
            start = self.attack_start_round
        return round_index >= start

    def benign_sgd(self) -> SgdConfig:
        return SgdConfig(self.benign_lr, self.batch_size, self.epochs,
                         self.mean_gradients, self.weight_decay)

    def poison_sgd(self) -> SgdConfig:
        return SgdConfig(self.poison_lr, self.batch_size, self.epochs,
                         self.mean_gradients, self.weight_decay)


@dataclass
class RoundRecord:
    round: int
    acc: float
    asr: float
    clean_accepted: int
    clean_rejected: int
    bd_accepted: int
    bd_rejected: int
    aggregator_pick: int
    selected: list[int] = field(default_factory=list)


def benign_local_update(global_model: LinearModel, client: ClientState,
                        fed: FederationConfig, inv: InversionConfig,
                        rng: SeededRng, round_index: int,
                        harden: bool) -> LinearModel:
    """Benign client update: hardening (when active) plus clean SGD.

    Hardening inverts triggers for the k most promising (largest-distance)
    pairs and the k most fragile (smallest-distance) pairs, plus one
    universal probe toward the most fragile target; stamped samples keep
    their ground-truth labels. Inverted masks whose L1 norm exceeds the
    configured size limit are treated as genuine class transformations and
    excluded from the augmented pool.
    """
    if len(client.shard) == 0:
        return global_model.copy()
    sgd_cfg = client.sgd or fed.benign_sgd()
    if not harden:
        return train_sgd(global_model, client.shard.images, client.shard.labels,
                         sgd_cfg, rng.child(1))

    if not client.selected_before or client.distance_cache is None:
        client.distance_cache = warmup_distances(global_model, client.shard, inv,
                                                 rng.child(2))
        client.selected_before = True
    dm = client.distance_cache
    if not dm.set_pairs():
        return train_sgd(global_model, client.shard.images, client.shard.labels,
                         sgd_cfg, rng.child(1))

    k = inv.pairs_per_round
    promising = select_pairs(dm, k)
    fragile = select_fragile_pairs(dm, k)
    pairs = list(dict.fromkeys(promising + fragile))
    limit = inv.size_limit(client.shard.dim)
    counts = client.shard.class_counts()

    aug_x: list[np.ndarray] = []
    aug_y: list[np.ndarray] = []

    # universal probe toward the most fragile target class
    probe_target = fragile[0][1]
    src_idx = np.where(client.shard.labels != probe_target)[0]
    if len(src_idx):
        take = min(inv.universal_source_samples, len(src_idx))
        sub = rng.child(3, round_index).choice(src_idx, size=take, replace=False)
        res = invert_trigger(global_model, client.shard.images[sub],
                             client.shard.labels[sub], probe_target, inv,
                             rng.child(4, round_index),
                             init=client.trigger_cache.get(("uni", probe_target)))
        client.trigger_cache[("uni", probe_target)] = res.trigger
        if class_distance(res.trigger) <= limit:
            aug_x.append(stamp(client.shard.images[sub], res.trigger))
            aug_y.append(client.shard.labels[sub])

    for (a, b) in pairs:
        prng = rng.child(5, round_index, a, b)
        try:
            if counts[a] > inv.min_class_samples and counts[b] > inv.min_class_samples:
                inits = (client.trigger_cache.get((a, b)), client.trigger_cache.get((b, a)))
                xs, ys, (t_ab, t_ba) = symmetric_invert(
                    global_model, client.shard, (a, b), inv, prng, dm, round_index,
                    inits=inits)
                client.trigger_cache[(a, b)] = t_ab
                client.trigger_cache[(b, a)] = t_ba
                keep = np.concatenate([
                    np.full((ys == a).sum(), class_distance(t_ab) <= limit),
                    np.full((ys == b).sum(), class_distance(t_ba) <= limit)])
                if keep.any():
                    aug_x.append(xs[keep])
                    aug_y.append(ys[keep])
            else:
                # single direction from whichever class has enough samples
                src, tgt = (a, b) if counts[a] > inv.min_class_samples else (b, a)
                xs, ys, t_st = asymmetric_invert(
                    global_model, client.shard, (src, tgt), inv, prng, dm,
                    round_index, init=client.trigger_cache.get((src, tgt)))
                client.trigger_cache[(src, tgt)] = t_st
                if class_distance(t_st) <= limit:
                    aug_x.append(xs)
                    aug_y.append(ys)
        except InsufficientDataError:
            continue

    extra = None
    if aug_x:
        extra = (np.vstack(aug_x), np.concatenate(aug_y))
    return train_sgd(global_model, client.shard.images, client.shard.labels,
                     sgd_cfg, rng.child(1), extra=extra,
                     extra_per_batch=fed.augment_per_batch)


def malicious_local_update(global_model: LinearModel, client: ClientState,
                           trig: TriggerSpec, fed: FederationConfig,
                           inv: InversionConfig, rng: SeededRng,
                           adaptive: bool = False) -> LinearModel:
    """Poison training at the poison learning rate, with optional adaptive
    trigger inversion and final weight scaling (model replacement)."""
    if len(client.shard) == 0:
        return global_model.copy()
    cfg = client.sgd or fed.poison_sgd()

    own_trigger = None
    if adaptive:
        src_idx = np.where(client.shard.labels != trig.target_label)[0]
        if len(src_idx):
            take = min(inv.universal_source_samples, len(src_idx))
            sub = rng.child(6).choice(src_idx, size=take, replace=False)
            res = invert_trigger(global_model, client.shard.images[sub],
                                 client.shard.labels[sub], trig.target_label, inv,
                                 rng.child(8),
                                 init=client.trigger_cache.get(("adaptive", trig.target_label)))
            client.trigger_cache[("adaptive", trig.target_label)] = res.trigger
            own_trigger = res.trigger

    cur = global_model.copy()
    steps_per_epoch = max(1, len(client.shard) // cfg.batch_size)
    brng = rng.child(9)
    from .model import gradient, sgd_step  # local import to avoid cycle noise
    for _ in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            xs, ys = make_poison_batch(client.shard, trig, cfg.batch_size,
                                       fed.poison_count, brng)
            if own_trigger is not None:
                extra_idx = brng.integers(0, len(client.shard), size=fed.poison_count)
                extra_x = stamp(client.shard.images[extra_idx], own_trigger)
                extra_y = np.full(fed.poison_count, trig.target_label)
                xs = np.vstack([xs, extra_x])
                ys = np.concatenate([ys, extra_y])
            gw, gb = gradient(cur, xs, ys, mean=cfg.mean_gradients)
            if cfg.weight_decay:
                gw = gw + cfg.weight_decay * cur.weights
            cur = sgd_step(cur, gw, gb, cfg.learning_rate)

    if fed.scale_factor != 1.0:
        w = global_model.weights + fed.scale_factor * (cur.weights - global_model.weights)
        b = None
        if global_model.bias is not None:
            b = global_model.bias + fed.scale_factor * (cur.bias - global_model.bias)
        cur = LinearModel(w, b)
    return cur


def aggregate_fedavg(updates: list[tuple[LinearModel, int]]) -> LinearModel:
    """Sample-count-weighted average, g_k = n_k / sum(n)."""
    if not updates:
        raise ValueError("no updates to aggregate")
    total = sum(n for _, n in updates)
    if total == 0:
        # all shards empty: plain mean keeps the round well-defined
        weights = [1.0 / len(updates)] * len(updates)
    else:
        weights = [n / total for _, n in updates]
    w = sum(g * m.weights for g, (m, _) in zip(weights, updates))
    b = None
    if updates[0][0].bias is not None:
        b = sum(g * m.bias for g, (m, _) in zip(weights, updates))
    return LinearModel(w, b)


def aggregate_sum(updates: list[tuple[LinearModel, int]]) -> LinearModel:
    """Unnormalized sum (g_k = 1); used by the two-client analysis harness."""
    if not updates:
        raise ValueError("no updates to aggregate")
    w = sum(m.weights for m, _ in updates)
    b = None
    if updates[0][0].bias is not None:
        b = sum(m.bias for m, _ in updates)
    return LinearModel(w, b)


def krum_scores(flats: np.ndarray, f: int) -> np.ndarray:
    """Per-update sum of squared distances to its n-f-2 nearest other updates."""
    n = len(flats)
    d2 = ((flats[:, None, :] - flats[None, :, :]) ** 2).sum(axis=2)
    scores = np.empty(n)
    keep = n - f - 2
    for i in range(n):
        others = np.sort(np.delete(d2[i], i))
        scores[i] = others[:keep].sum()
    return scores


def aggregate_krum(updates: list[tuple[LinearModel, int]], f: int,
                   multi_m: int = 1) -> tuple[LinearModel, int]:
    """Krum / Multi-Krum; returns (model, selected index) where the index is
    the lowest-score update (ties break to the lowest client position)."""
    n = len(updates)
    if n < f + 3:
        raise ValueError(f"krum needs n >= f + 3 (n={n}, f={f})")
    flats = np.stack([m.flat() for m, _ in updates])
    scores = krum_scores(flats, f)
    order = np.argsort(scores, kind="stable")
    pick = int(order[0])
    if multi_m <= 1:
        return updates[pick][0].copy(), pick
    chosen = sorted(int(i) for i in order[:multi_m])
    avg = aggregate_fedavg([(updates[i][0], 1) for i in chosen])
    return avg, pick


def aggregate_coordinatewise(updates: list[tuple[LinearModel, int]], rule: str,
                             trim_beta: int = 1) -> LinearModel:
    """Coordinate-wise median or beta-trimmed mean."""
    if not updates:
        raise ValueError("no updates to aggregate")
    n = len(updates)
    flats = np.stack([m.flat() for m, _ in updates])
    if rule == "median":
        agg = np.median(flats, axis=0)
    elif rule == "trimmed_mean":
        if n <= 2 * trim_beta:
            raise ValueError(f"trimmed_mean needs n > 2*beta (n={n}, beta={trim_beta})")
        srt = np.sort(flats, axis=0)
        agg = srt[trim_beta:n - trim_beta].mean(axis=0)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    tmpl = updates[0][0]
    d, classes = tmpl.weights.shape
    w = agg[: d * classes].reshape(d, classes)
    b = agg[d * classes:] if tmpl.bias is not None else None
    return LinearModel(w, b)


def _aggregate(updates: list[tuple[LinearModel, int]], fed: FederationConfig) -> tuple[LinearModel, int]:
    if fed.aggregator == "fedavg":
        return aggregate_fedavg(updates), -1
    if fed.aggregator == "sum":
        return aggregate_sum(updates), -1
    if fed.aggregator in ("krum", "multikrum"):
        f = fed.krum_f if fed.krum_f is not None else fed.num_adversaries
        m = fed.multikrum_m if fed.aggregator == "multikrum" else 1
        return aggregate_krum(updates, f, m)
    if fed.aggregator in ("median", "trimmed_mean"):
        return aggregate_coordinatewise(updates, fed.aggregator, fed.trim_beta), -1
    raise ValueError(f"unknown aggregator {fed.aggregator!r}")


def select_clients(clients: list[ClientState], fed: FederationConfig,
                   round_index: int, rng: SeededRng) -> list[ClientState]:
    """Adversaries are forced in during their attack schedule; the remainder
    is drawn uniformly without replacement from the benign pool."""
    attackers = [c for c in clients if c.role == MALICIOUS]
    benign = [c for c in clients if c.role == BENIGN]
    chosen: list[ClientState] = []
    if fed.attack_active(round_index):
        chosen.extend(attackers[: fed.num_adversaries])
    slots = fed.clients_per_round - len(chosen)
    if slots > 0 and benign:
        take = min(slots, len(benign))
        idx = rng.child(100, round_index).choice(len(benign), size=take, replace=False)
        chosen.extend(benign[int(i)] for i in sorted(idx))
    return sorted(chosen, key=lambda c: c.id)


def run_round(global_model: LinearModel, clients: list[ClientState],
              trig: TriggerSpec, fed: FederationConfig, inv: InversionConfig,
              test_set: LabeledDataset, round_index: int, rng: SeededRng,
              ) -> tuple[LinearModel, RoundRecord]:
    """One federated round: select, local updates from the same incoming
    global weights, aggregate, evaluate."""
    selected = select_clients(clients, fed, round_index, rng)
    harden = fed.defense_active(round_index)
    adaptive = fed.attack_mode == "adaptive"

    def local(client: ClientState) -> LinearModel:
        crng = rng.child(200, round_index, client.id)
        if client.role == MALICIOUS and fed.attack_active(round_index):
            return malicious_local_update(global_model, client, trig, fed, inv,
                                          crng, adaptive=adaptive)
        return benign_local_update(global_model, client, fed, inv, crng,
                                   round_index, harden)

    if fed.threads > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=fed.threads) as pool:
            models = list(pool.map(local, selected))
    else:
        models = [local(c) for c in selected]

    updates = [(m, len(c.shard)) for m, c in zip(models, selected)]
    new_global, pick = _aggregate(updates, fed)
    metrics = compute_metrics(new_global, test_set, trig, fed.tau)
    record = RoundRecord(
        round=round_index, acc=metrics.acc, asr=metrics.asr,
        clean_accepted=metrics.clean_accepted, clean_rejected=metrics.clean_rejected,
        bd_accepted=metrics.bd_accepted, bd_rejected=metrics.bd_rejected,
        aggregator_pick=pick, selected=[c.id for c in selected],
    )
    return new_global, record


def run_federation(global_model: LinearModel, clients: list[ClientState],
                   trig: TriggerSpec, fed: FederationConfig, inv: InversionConfig,
                   test_set: LabeledDataset, rng: SeededRng,
                   ) -> tuple[LinearModel, list[RoundRecord], MetricSet]:
    """Drive `total_rounds` rounds and return the final model, the per-round
    records, and the final metric set."""
    records: list[RoundRecord] = []
    model = global_model
    for r in range(fed.total_rounds):
        model, rec = run_round(model, clients, trig, fed, inv, test_set, r, rng)
        records.append(rec)
    final = compute_metrics(model, test_set, trig, fed.tau)
    return model, records, final
