"""Experiment orchestration: build datasets/clients from a config, drive the
federation or the theory harness, and emit artifacts (CSV metrics, JSON
summaries, ROC dumps, recovered triggers)."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

from .config import ExperimentConfig
from .data import (LabeledDataset, TriggerSpec, dirichlet_partition, gen_synthetic,
                   load_digits_upscaled, load_idx, sized_partition,
                   square_patch_trigger)
from .federation import (BENIGN, MALICIOUS, ClientState, RoundRecord,
                         run_federation)
from .guard import (compute_metrics, confidences_and_predictions,
                    make_backdoor_eval_set, roc_points)
from .inversion import trigger_to_pgm, save_trigger
from .model import LinearModel, gaussian_model, zeros_model
from .numerics import SeededRng
from .theory import run_theory_harness


@dataclass
class DataBundle:
    train: LabeledDataset
    test: LabeledDataset


def build_data(cfg: ExperimentConfig, rng: SeededRng) -> DataBundle:
    d = cfg.data
    if d["kind"] == "digits":
        train, test = load_digits_upscaled(d["test_fraction"], seed=cfg.seed)
        return DataBundle(train, test)
    if d["kind"] == "synthetic":
        s = d["synthetic"]
        full = gen_synthetic(s["num_classes"], s["dim"], s["per_class"], rng.child(41),
                             noise=s["noise"], width=s["width"], height=s["height"],
                             border=s["border"])
        n_test = int(round(len(full) * d["test_fraction"]))
        idx = rng.child(42).permutation(len(full))
        return DataBundle(full.subset(idx[n_test:]), full.subset(idx[:n_test]))
    if d["kind"] == "idx":
        train = load_idx(d["images"], d["labels"], num_classes=d["num_classes"])
        if d["test_images"] is not None:
            test = load_idx(d["test_images"], d["test_labels"], num_classes=d["num_classes"])
        else:
            n_test = int(round(len(train) * d["test_fraction"]))
            idx = rng.child(42).permutation(len(train))
            train, test = train.subset(idx[n_test:]), train.subset(idx[:n_test])
        return DataBundle(train, test)
    raise ValueError(f"unknown data kind {d['kind']!r}")


def build_trigger(cfg: ExperimentConfig, bundle: DataBundle) -> TriggerSpec:
    t = cfg.trigger
    return square_patch_trigger(bundle.train.width, bundle.train.height, t["side"],
                                t["target_label"], corner=t["corner"],
                                value=t["value"], inset=t["inset"])


def build_clients(cfg: ExperimentConfig, bundle: DataBundle, rng: SeededRng,
                  ) -> list[ClientState]:
    fed = cfg.raw["federation"]
    n = fed["num_clients"]
    if fed["partition"] == "sized":
        plan = sized_partition(bundle.train, fed["shard_fractions"], rng.child(43))
    else:
        plan = dirichlet_partition(bundle.train, n, fed["dirichlet_alpha"], rng.child(43))
    # the last num_adversaries clients are the fixed attacker population
    n_mal = fed["num_adversaries"]
    clients = []
    for cid in range(n):
        role = MALICIOUS if cid >= n - n_mal else BENIGN
        clients.append(ClientState(id=cid, role=role,
                                   shard=bundle.train.subset(plan.shard_indices(cid))))
    return clients


def build_model(cfg: ExperimentConfig, bundle: DataBundle, rng: SeededRng) -> LinearModel:
    m = cfg.model
    if m["init"] == "zeros":
        return zeros_model(bundle.train.dim, bundle.train.num_classes, bias=m["bias"])
    return gaussian_model(bundle.train.dim, bundle.train.num_classes, rng.child(44),
                          sigma=m["init_sigma"], bias=m["bias"])


def emit_rounds_csv(records: list[RoundRecord], path: str) -> None:
    """RFC-4180 CSV with the fixed header; reals use 6 decimals."""
    if not records:
        raise ValueError("no records to emit")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(["round", "acc", "asr", "clean_rejected", "bd_rejected",
                         "aggregator_pick"])
        for r in records:
            writer.writerow([r.round, f"{r.acc:.6f}", f"{r.asr:.6f}",
                             r.clean_rejected, r.bd_rejected, r.aggregator_pick])


def emit_json(payload: dict, path: str) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def emit_roc_csv(points: list[tuple[float, float, float]], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(["threshold", "tpr", "fpr"])
        for t, tpr, fpr in points:
            writer.writerow([f"{t:.6f}", f"{tpr:.6f}", f"{fpr:.6f}"])


def run_single(cfg: ExperimentConfig, out_dir: str) -> dict:
    """One federation run; writes rounds.csv, summary.json, roc.csv and the
    recovered triggers, returning the summary payload."""
    os.makedirs(out_dir, exist_ok=True)
    rng = SeededRng(cfg.seed)
    bundle = build_data(cfg, rng)
    trig = build_trigger(cfg, bundle)
    clients = build_clients(cfg, bundle, rng)
    model = build_model(cfg, bundle, rng)
    fed = cfg.federation()
    inv = cfg.inversion()

    final_model, records, metrics = run_federation(model, clients, trig, fed, inv,
                                                   bundle.test, rng)
    emit_rounds_csv(records, os.path.join(out_dir, "rounds.csv"))

    conf_clean, _ = confidences_and_predictions(final_model, bundle.test.images)
    bd_inputs = make_backdoor_eval_set(bundle.test, trig)
    conf_bd, _ = confidences_and_predictions(final_model, bd_inputs)
    emit_roc_csv(roc_points(conf_clean, conf_bd), os.path.join(out_dir, "roc.csv"))

    if cfg.output["export_triggers"]:
        tdir = os.path.join(out_dir, "triggers")
        os.makedirs(tdir, exist_ok=True)
        save_trigger(trig, os.path.join(tdir, "ground_truth.trig"))
        trigger_to_pgm(trig, bundle.train.width, bundle.train.height,
                       os.path.join(tdir, "ground_truth"))
        for client in clients:
            if client.role != BENIGN:
                continue
            for key, cached in sorted(client.trigger_cache.items(), key=repr)[:8]:
                tag = "_".join(str(k) for k in (key if isinstance(key, tuple) else (key,)))
                save_trigger(cached, os.path.join(tdir, f"client{client.id}_{tag}.trig"))
            break

    tau_sweep = []
    for tau in sorted({0.0, 0.3, 0.7, fed.tau}):
        m = compute_metrics(final_model, bundle.test, trig, tau)
        tau_sweep.append({"tau": tau, "acc": m.acc, "asr": m.asr})

    summary = {
        "seed": cfg.seed,
        "final": metrics.as_dict(),
        "tau_sweep": tau_sweep,
        "rounds": len(records),
        "attack_mode": fed.attack_mode,
        "attack_start_round": fed.attack_start_round,
        "defense": fed.defense,
        "tau": fed.tau,
        "num_clients": fed.num_clients,
        "data_kind": cfg.data["kind"],
        "trigger_side": cfg.trigger["side"],
        "target_label": cfg.trigger["target_label"],
    }
    emit_json(summary, os.path.join(out_dir, "summary.json"))
    return summary


def run_theory(cfg: ExperimentConfig, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    rng = SeededRng(cfg.seed)
    bundle = build_data(cfg, rng)
    report = run_theory_harness(cfg.theory(), bundle.train, bundle.test,
                                rng.child(77), inv=cfg.inversion(),
                                keep_per_sample=cfg.output["per_sample_bounds"])
    payload = report.as_dict()
    emit_json(payload, os.path.join(out_dir, "theory.json"))
    return payload


def run_sweep(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Sweep whichever of tau / trigger side / Dirichlet alpha lists is set."""
    os.makedirs(out_dir, exist_ok=True)
    sweeps = cfg.sweeps
    results: dict[str, list] = {}

    def override(path: list[str], value):
        import copy as _copy
        raw = _copy.deepcopy(cfg.raw)
        node = raw
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
        return ExperimentConfig(raw)

    if sweeps["taus"]:
        results["tau"] = []
        for tau in sweeps["taus"]:
            sub = override(["federation", "tau"], float(tau))
            summary = run_single(sub, os.path.join(out_dir, f"tau_{tau:.2f}"))
            results["tau"].append({"tau": float(tau), "summary": summary})
    if sweeps["trigger_sides"]:
        results["trigger_side"] = []
        for side in sweeps["trigger_sides"]:
            sub = override(["trigger", "side"], int(side))
            summary = run_single(sub, os.path.join(out_dir, f"side_{side}"))
            results["trigger_side"].append({"side": int(side), "summary": summary})
    if sweeps["dirichlet_alphas"]:
        results["dirichlet_alpha"] = []
        for alpha in sweeps["dirichlet_alphas"]:
            sub = override(["federation", "dirichlet_alpha"], float(alpha))
            summary = run_single(sub, os.path.join(out_dir, f"alpha_{alpha:.2f}"))
            results["dirichlet_alpha"].append({"alpha": float(alpha), "summary": summary})
    if not results:
        raise ValueError("no sweep lists configured (sweeps.taus / trigger_sides / dirichlet_alphas)")
    emit_json(results, os.path.join(out_dir, "sweep_summary.json"))
    return results
