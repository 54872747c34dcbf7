import itertools

import numpy as np
import pytest

from fedharden.data import LabeledDataset, gen_synthetic, square_patch_trigger
from fedharden.federation import (BENIGN, MALICIOUS, ClientState,
                                  FederationConfig, aggregate_coordinatewise,
                                  aggregate_fedavg, aggregate_krum,
                                  aggregate_sum, benign_local_update,
                                  malicious_local_update, run_federation,
                                  run_round, select_clients)
from fedharden.guard import compute_metrics
from fedharden.inversion import InversionConfig
from fedharden.model import LinearModel, zeros_model
from fedharden.numerics import SeededRng


def _scalar_models(values):
    return [(LinearModel(np.array([[float(v)]]), None), 1) for v in values]


def _fed(**kw):
    base = dict(num_clients=4, clients_per_round=2, num_adversaries=1,
                total_rounds=4, attack_mode="none", attack_start_round=0,
                epochs=1, batch_size=16, poison_count=5)
    base.update(kw)
    return FederationConfig(**base)


# ---- aggregation rules ----

def test_fedavg_identical_updates():
    models = _scalar_models([2.0, 2.0, 2.0])
    assert aggregate_fedavg(models).weights[0, 0] == 2.0


def test_fedavg_equal_counts_mean():
    assert aggregate_fedavg(_scalar_models([0.0, 2.0])).weights[0, 0] == 1.0


def test_fedavg_weighted_mean():
    updates = [(LinearModel(np.array([[1.0]]), None), 3),
               (LinearModel(np.array([[5.0]]), None), 1)]
    assert aggregate_fedavg(updates).weights[0, 0] == 2.0


def test_fedavg_permutation_invariant():
    rng = SeededRng(1)
    models = [(LinearModel(rng.normal(0, 1, (3, 2)), None), int(n))
              for n in rng.integers(1, 10, size=5)]
    base = aggregate_fedavg(models)
    for perm in itertools.permutations(range(5)):
        shuffled = aggregate_fedavg([models[i] for i in perm])
        np.testing.assert_allclose(shuffled.weights, base.weights, atol=1e-12)


def test_aggregate_sum():
    assert aggregate_sum(_scalar_models([1.0, 2.0])).weights[0, 0] == 3.0


def test_fedavg_all_empty_shards_falls_back_to_mean():
    updates = [(LinearModel(np.array([[2.0]]), None), 0),
               (LinearModel(np.array([[4.0]]), None), 0)]
    assert aggregate_fedavg(updates).weights[0, 0] == 3.0


def test_fedavg_empty_list_errors():
    with pytest.raises(ValueError):
        aggregate_fedavg([])


def brute_force_krum(flats, f, multi_m=1):
    n = len(flats)
    scores = []
    for i in range(n):
        dists = sorted(float(((flats[i] - flats[j]) ** 2).sum())
                       for j in range(n) if j != i)
        scores.append(sum(dists[: n - f - 2]))
    order = sorted(range(n), key=lambda i: (scores[i], i))
    return order[0], sorted(order[:multi_m])


def test_krum_scalar_tie_case():
    models = _scalar_models([0.0, 0.1, 0.2, 10.0])
    agg, pick = aggregate_krum(models, f=1, multi_m=1)
    assert pick == 0
    assert agg.weights[0, 0] == 0.0


def test_krum_identical_updates():
    models = _scalar_models([3.0, 3.0, 3.0, 3.0])
    agg, _ = aggregate_krum(models, f=1)
    assert agg.weights[0, 0] == 3.0


@pytest.mark.parametrize("seed", range(20))
def test_krum_matches_brute_force(seed):
    rng = SeededRng(seed)
    n = int(rng.integers(4, 7))
    f = int(rng.integers(1, max(2, n - 2)))
    if n < f + 3:
        f = n - 3
    models = [(LinearModel(rng.normal(0, 1, (2, 2)), None), 1) for _ in range(n)]
    flats = [m.flat() for m, _ in models]
    expect_pick, expect_multi = brute_force_krum(flats, f, multi_m=min(3, n))
    _, pick = aggregate_krum(models, f=f, multi_m=1)
    assert pick == expect_pick
    multi, _ = aggregate_krum(models, f=f, multi_m=min(3, n))
    expect_avg = aggregate_fedavg([(models[i][0], 1) for i in expect_multi])
    np.testing.assert_allclose(multi.weights, expect_avg.weights, atol=1e-12)


def test_krum_needs_enough_updates():
    with pytest.raises(ValueError):
        aggregate_krum(_scalar_models([1.0, 2.0, 3.0]), f=1)


def test_krum_translation_invariant():
    rng = SeededRng(9)
    models = [(LinearModel(rng.normal(0, 1, (2, 2)), None), 1) for _ in range(5)]
    _, pick = aggregate_krum(models, f=1)
    shift = np.full((2, 2), 100.0)
    shifted = [(LinearModel(m.weights + shift, None), 1) for m, _ in models]
    _, pick2 = aggregate_krum(shifted, f=1)
    assert pick == pick2


def test_coordinatewise_median():
    agg = aggregate_coordinatewise(_scalar_models([1.0, 2.0, 100.0]), "median")
    assert agg.weights[0, 0] == 2.0


def test_coordinatewise_median_even_count():
    agg = aggregate_coordinatewise(_scalar_models([1.0, 2.0, 4.0, 100.0]), "median")
    assert agg.weights[0, 0] == 3.0


def test_trimmed_mean():
    agg = aggregate_coordinatewise(_scalar_models([1.0, 2.0, 3.0, 100.0]),
                                   "trimmed_mean", trim_beta=1)
    assert agg.weights[0, 0] == 2.5


def test_single_update_fixed_point():
    one = _scalar_models([7.0])
    assert aggregate_coordinatewise(one, "median").weights[0, 0] == 7.0
    with pytest.raises(ValueError):
        aggregate_coordinatewise(one, "trimmed_mean", trim_beta=1)


def test_coordinatewise_bounded_by_inputs():
    rng = SeededRng(10)
    models = [(LinearModel(rng.normal(0, 1, (3, 3)), None), 1) for _ in range(5)]
    stack = np.stack([m.weights for m, _ in models])
    for rule in ("median", "trimmed_mean"):
        agg = aggregate_coordinatewise(models, rule, trim_beta=1)
        assert (agg.weights >= stack.min(axis=0) - 1e-12).all()
        assert (agg.weights <= stack.max(axis=0) + 1e-12).all()


# ---- client updates and schedules ----

@pytest.fixture(scope="module")
def world():
    ds = gen_synthetic(num_classes=4, dim=64, per_class=80, rng=SeededRng(20),
                       noise=0.05, width=8, height=8)
    grid = ds.images.reshape(-1, 8, 8)
    grid[:, :2, :] = 0.0
    grid[:, :, :2] = 0.0
    ds = LabeledDataset(grid.reshape(-1, 64), ds.labels, width=8, height=8,
                        num_classes=4)
    trig = square_patch_trigger(8, 8, 2, target_label=1)
    half = len(ds) // 2
    clients = [
        ClientState(0, BENIGN, ds.subset(np.arange(half))),
        ClientState(1, MALICIOUS, ds.subset(np.arange(half, len(ds)))),
    ]
    return ds, trig, clients


def test_benign_update_zero_epochs_returns_global(world):
    ds, trig, clients = world
    fed = _fed(num_clients=2, clients_per_round=2, epochs=0)
    model = zeros_model(64, 4)
    out = benign_local_update(model, clients[0], fed, InversionConfig(max_steps=2),
                              SeededRng(0), 0, harden=False)
    np.testing.assert_array_equal(out.weights, model.weights)


def test_benign_update_empty_shard_is_noop():
    empty = ClientState(0, BENIGN, LabeledDataset(np.empty((0, 8)),
                                                  np.empty(0, dtype=np.int64),
                                                  width=8, height=1, num_classes=3))
    fed = _fed(num_clients=2, clients_per_round=1, num_adversaries=0)
    model = zeros_model(8, 3)
    out = benign_local_update(model, empty, fed, InversionConfig(max_steps=2),
                              SeededRng(0), 0, harden=True)
    np.testing.assert_array_equal(out.weights, model.weights)


def test_flip_update_single_class_shard_degrades_to_clean_sgd():
    rng = SeededRng(21)
    shard = LabeledDataset(rng.random((40, 16)), np.zeros(40, dtype=np.int64),
                           width=4, height=4, num_classes=3)
    client = ClientState(0, BENIGN, shard)
    fed = _fed(num_clients=2, clients_per_round=1, num_adversaries=0, epochs=1)
    out = benign_local_update(zeros_model(16, 3), client, fed,
                              InversionConfig(max_steps=2), SeededRng(1), 0,
                              harden=True)
    assert np.isfinite(out.weights).all()
    assert np.abs(out.weights).sum() > 0  # clean SGD still happened


def test_malicious_scaling_identity(world):
    ds, trig, clients = world
    model = zeros_model(64, 4)
    inv = InversionConfig(max_steps=2)
    fed1 = _fed(num_clients=2, clients_per_round=2, scale_factor=1.0, epochs=1)
    fed2 = _fed(num_clients=2, clients_per_round=2, scale_factor=2.0, epochs=1)
    plain = malicious_local_update(model, clients[1], trig, fed1, inv, SeededRng(5))
    scaled = malicious_local_update(model, clients[1], trig, fed2, inv, SeededRng(5))
    np.testing.assert_allclose(scaled.weights - model.weights,
                               2.0 * (plain.weights - model.weights), atol=1e-12)


def test_adaptive_update_runs(world):
    ds, trig, clients = world
    fed = _fed(num_clients=2, clients_per_round=2, attack_mode="adaptive", epochs=1)
    out = malicious_local_update(zeros_model(64, 4), clients[1], trig, fed,
                                 InversionConfig(max_steps=3), SeededRng(6),
                                 adaptive=True)
    assert np.isfinite(out.weights).all()


def test_schedule_continuous_vs_single_shot(world):
    _, _, clients = world
    continuous = _fed(num_clients=2, clients_per_round=2, num_adversaries=1,
                      attack_mode="continuous", attack_start_round=3)
    rng = SeededRng(7)
    for r in range(6):
        sel = select_clients(clients, continuous, r, rng)
        has_mal = any(c.role == MALICIOUS for c in sel)
        assert has_mal == (r >= 3)

    single = _fed(num_clients=2, clients_per_round=2, num_adversaries=1,
                  attack_mode="single_shot", attack_start_round=3)
    rounds_with_mal = [r for r in range(6)
                       if any(c.role == MALICIOUS
                              for c in select_clients(clients, single, r, rng))]
    assert rounds_with_mal == [3]


def test_run_round_selects_expected_count():
    ds = gen_synthetic(num_classes=3, dim=16, per_class=60, rng=SeededRng(30),
                       noise=0.05, width=4, height=4)
    clients = []
    per = len(ds) // 12
    for cid in range(12):
        clients.append(ClientState(cid, BENIGN,
                                   ds.subset(np.arange(cid * per, (cid + 1) * per))))
    trig = square_patch_trigger(4, 4, 1, target_label=1)
    fed = FederationConfig(num_clients=12, clients_per_round=10, num_adversaries=0,
                           total_rounds=1, attack_mode="none", epochs=1)
    _, record = run_round(zeros_model(16, 3), clients, trig, fed,
                          InversionConfig(max_steps=2), ds, 0, SeededRng(31))
    assert len(record.selected) == 10


def test_run_round_deterministic(world):
    ds, trig, clients_a = world
    # rebuild identical client state twice
    def fresh():
        half = len(ds) // 2
        return [ClientState(0, BENIGN, ds.subset(np.arange(half))),
                ClientState(1, MALICIOUS, ds.subset(np.arange(half, len(ds))))]

    fed = FederationConfig(num_clients=2, clients_per_round=2, num_adversaries=1,
                           total_rounds=3, attack_mode="continuous",
                           attack_start_round=1, defense="flip",
                           defense_start_round=1, epochs=1)
    inv = InversionConfig(max_steps=5)
    m1, rec1, _ = run_federation(zeros_model(64, 4), fresh(), trig, fed, inv,
                                 ds, SeededRng(32))
    m2, rec2, _ = run_federation(zeros_model(64, 4), fresh(), trig, fed, inv,
                                 ds, SeededRng(32))
    np.testing.assert_array_equal(m1.weights, m2.weights)
    assert [(r.acc, r.asr, r.selected) for r in rec1] == \
           [(r.acc, r.asr, r.selected) for r in rec2]


def test_no_attack_accuracy_improves():
    ds = gen_synthetic(num_classes=3, dim=16, per_class=100, rng=SeededRng(33),
                       noise=0.05, width=4, height=4)
    clients = [ClientState(i, BENIGN, ds.subset(np.arange(i, len(ds), 4)))
               for i in range(4)]
    trig = square_patch_trigger(4, 4, 1, target_label=1)
    fed = FederationConfig(num_clients=4, clients_per_round=4, num_adversaries=0,
                           total_rounds=20, attack_mode="none", epochs=1, tau=0.0)
    model = zeros_model(16, 3)
    initial = compute_metrics(model, ds, trig, 0.0).acc
    final_model, _, final = run_federation(model, clients, trig, fed,
                                           InversionConfig(max_steps=2), ds,
                                           SeededRng(34))
    assert final.acc >= initial


def test_flip_update_lowers_loss_on_truly_stamped_samples(world):
    from fedharden.data import make_poison_batch, stamp
    from fedharden.model import (SgdConfig, forward_probs, gradient, sgd_step,
                                 train_sgd)
    from fedharden.numerics import cross_entropy_rows

    ds, trig, clients = world
    # poison a converged model so the incoming global carries the backdoor
    rng = SeededRng(90)
    model = train_sgd(zeros_model(64, 4), ds.images, ds.labels,
                      SgdConfig(0.1, 32, 10), rng.child(1))
    for _ in range(30):
        xs, ys = make_poison_batch(ds, trig, 32, 10, rng.child(2))
        gw, gb = gradient(model, xs, ys, mean=True)
        model = sgd_step(model, gw, gb, 0.1)

    stamped = stamp(ds.images, trig)

    def truth_loss(m):
        return float(cross_entropy_rows(forward_probs(m, stamped), ds.labels).mean())

    before = truth_loss(model)
    fed = _fed(num_clients=2, clients_per_round=2, epochs=1)
    client = ClientState(0, BENIGN, clients[0].shard)
    updated = benign_local_update(model, client, fed,
                                  InversionConfig(max_steps=60, mask_weight=1e-2),
                                  SeededRng(91), 0, harden=True)
    assert truth_loss(updated) < before


def test_per_client_sgd_override_honored(world):
    ds, trig, clients = world
    model = zeros_model(64, 4)
    fed = _fed(num_clients=2, clients_per_round=2, epochs=1)
    from fedharden.model import SgdConfig
    fast = ClientState(0, BENIGN, clients[0].shard,
                       sgd=SgdConfig(learning_rate=0.5, batch_size=16, epochs=1))
    slow = ClientState(0, BENIGN, clients[0].shard,
                       sgd=SgdConfig(learning_rate=0.001, batch_size=16, epochs=1))
    out_fast = benign_local_update(model, fast, fed, InversionConfig(max_steps=2),
                                   SeededRng(2), 0, harden=False)
    out_slow = benign_local_update(model, slow, fed, InversionConfig(max_steps=2),
                                   SeededRng(2), 0, harden=False)
    assert np.abs(out_fast.weights).sum() > np.abs(out_slow.weights).sum() * 10


def test_round_record_counts_conserve(world):
    ds, trig, clients = world
    fed = FederationConfig(num_clients=2, clients_per_round=2, num_adversaries=1,
                           total_rounds=1, attack_mode="none", epochs=1)
    _, record = run_round(zeros_model(64, 4), clients, trig, fed,
                          InversionConfig(max_steps=2), ds, 0, SeededRng(3))
    assert record.clean_accepted + record.clean_rejected == len(ds)
    assert record.bd_accepted + record.bd_rejected == (ds.labels != 1).sum()


def test_threads_do_not_change_results(world):
    ds, trig, _ = world
    def fresh():
        half = len(ds) // 2
        return [ClientState(0, BENIGN, ds.subset(np.arange(half))),
                ClientState(1, MALICIOUS, ds.subset(np.arange(half, len(ds))))]

    kw = dict(num_clients=2, clients_per_round=2, num_adversaries=1,
              total_rounds=2, attack_mode="continuous", attack_start_round=0,
              epochs=1)
    inv = InversionConfig(max_steps=3)
    m1, _, _ = run_federation(zeros_model(64, 4), fresh(), trig,
                              FederationConfig(**kw), inv, ds, SeededRng(35))
    m2, _, _ = run_federation(zeros_model(64, 4), fresh(), trig,
                              FederationConfig(**kw, threads=2), inv, ds, SeededRng(35))
    np.testing.assert_array_equal(m1.weights, m2.weights)
