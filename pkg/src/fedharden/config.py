"""Declarative experiment configuration: schema validation, defaults matching
the standard federated setup, and shipped presets."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass

from .federation import FederationConfig
from .inversion import InversionConfig
from .theory import TheoryConfig


class ConfigError(ValueError):
    """Schema violation; the message names the offending key and constraint."""


_DEFAULTS: dict = {
    "seed": 1,
    "data": {
        "kind": "digits",  # digits | synthetic | idx
        "test_fraction": 0.2,
        "images": None, "labels": None,
        "test_images": None, "test_labels": None,
        "num_classes": 10,
        "synthetic": {
            "num_classes": 10, "dim": 784, "per_class": 120,
            "noise": 0.08, "width": 28, "height": 28, "border": 0,
        },
    },
    "trigger": {
        "side": 4, "corner": "top_left", "value": 1.0,
        "target_label": 2, "inset": 0,
    },
    "model": {"bias": True, "init": "zeros", "init_sigma": 0.01},
    "federation": {
        "num_clients": 100,
        "clients_per_round": 10,
        "num_adversaries": 4,
        "total_rounds": 100,
        "attack_mode": "continuous",
        "attack_start_round": 30,
        "scale_factor": 1.0,
        "aggregator": "fedavg",
        "krum_f": None,
        "multikrum_m": 1,
        "trim_beta": 1,
        "defense": "none",
        "defense_start_round": None,
        "benign_lr": 0.1,
        "poison_lr": 0.05,
        "batch_size": 64,
        "epochs": None,  # None -> 5 for continuous/adaptive/none, 10 for single_shot
        "poison_count": 20,
        "augment_per_batch": 64,
        "mean_gradients": True,
        "weight_decay": 0.0,
        "tau": 0.3,
        "partition": "dirichlet",  # dirichlet | sized
        "dirichlet_alpha": 0.5,
        "shard_fractions": None,
        "threads": 1,
    },
    "inversion": {
        "max_steps": 100,
        "step_size": 0.1,
        "mask_weight": 1e-3,
        "pairs_per_round": 3,
        "min_class_samples": 5,
        "max_source_samples": 32,
        "universal_source_samples": 96,
        "trigger_size_limit": None,
        "init_mask_scale": 0.02,
    },
    "theory": {
        "benign_share": 0.55,
        "converge_rounds": 20,
        "implant_rounds": 5,
        "implant_mode": "continuous",
        "benign_lr": 0.1,
        "poison_lr": 0.05,
        "batch_size": 64,
        "epochs": 5,
        "poison_count": 20,
        "bound_lr": 2e-4,
        "tau": 0.3,
        "trigger_side": 4,
        "target_label": 2,
        "defense_enabled": True,
        "mc_draws": 1000,
        "max_aug_samples": None,
    },
    "sweeps": {"taus": None, "trigger_sides": None, "dirichlet_alphas": None},
    "output": {"export_triggers": True, "per_sample_bounds": False},
}


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def trigger(self) -> dict:
        return self.raw["trigger"]

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def sweeps(self) -> dict:
        return self.raw["sweeps"]

    @property
    def output(self) -> dict:
        return self.raw["output"]

    def federation(self) -> FederationConfig:
        f = dict(self.raw["federation"])
        if f["epochs"] is None:
            f["epochs"] = 10 if f["attack_mode"] == "single_shot" else 5
        for drop in ("partition", "dirichlet_alpha", "shard_fractions"):
            f.pop(drop)
        return FederationConfig(**f)

    def inversion(self) -> InversionConfig:
        return InversionConfig(**self.raw["inversion"])

    def theory(self) -> TheoryConfig:
        return TheoryConfig(**self.raw["theory"])


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[key], dict) and base[key] is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate(raw: dict) -> None:
    fed = raw["federation"]
    _require(isinstance(raw["seed"], int), "seed: must be an integer")
    _require(fed["clients_per_round"] <= fed["num_clients"],
             "federation.clients_per_round: must not exceed num_clients")
    _require(fed["num_adversaries"] <= fed["clients_per_round"],
             "federation.num_adversaries: must not exceed clients_per_round")
    _require(fed["attack_mode"] in ("none", "single_shot", "continuous", "adaptive"),
             "federation.attack_mode: must be none|single_shot|continuous|adaptive")
    _require(fed["defense"] in ("none", "flip"),
             "federation.defense: must be none|flip")
    _require(fed["aggregator"] in ("fedavg", "sum", "krum", "multikrum", "median", "trimmed_mean"),
             "federation.aggregator: unknown aggregation rule")
    _require(0.0 <= fed["tau"] <= 1.0, "federation.tau: must lie in [0, 1]")
    _require(fed["scale_factor"] >= 1.0, "federation.scale_factor: must be >= 1")
    _require(fed["partition"] in ("dirichlet", "sized"),
             "federation.partition: must be dirichlet|sized")
    _require(fed["dirichlet_alpha"] > 0, "federation.dirichlet_alpha: must be positive")
    if fed["partition"] == "sized":
        fr = fed["shard_fractions"]
        _require(isinstance(fr, list) and len(fr) == fed["num_clients"],
                 "federation.shard_fractions: needs one fraction per client")
        _require(abs(sum(fr) - 1.0) < 1e-9, "federation.shard_fractions: must sum to 1")
    _require(fed["poison_count"] <= fed["batch_size"],
             "federation.poison_count: must not exceed batch_size")
    _require(raw["data"]["kind"] in ("digits", "synthetic", "idx"),
             "data.kind: must be digits|synthetic|idx")
    if raw["data"]["kind"] == "idx":
        _require(raw["data"]["images"] is not None and raw["data"]["labels"] is not None,
                 "data.images/data.labels: required for kind=idx")
    _require(raw["trigger"]["corner"] in ("top_left", "top_right", "bottom_left", "bottom_right"),
             "trigger.corner: unknown corner")
    _require(raw["trigger"]["side"] >= 1, "trigger.side: must be >= 1")
    _require(raw["model"]["init"] in ("zeros", "gaussian"),
             "model.init: must be zeros|gaussian")


def parse_config_dict(overrides: dict | None = None, preset: str | None = None) -> ExperimentConfig:
    """Merge defaults <- preset <- overrides with strict unknown-key rejection."""
    raw = copy.deepcopy(_DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (have: {', '.join(sorted(PRESETS))})")
        raw = _merge(raw, PRESETS[preset])
    if overrides:
        raw = _merge(raw, overrides)
    _validate(raw)
    return ExperimentConfig(raw)


def parse_config(path_or_text: str | None = None, preset: str | None = None) -> ExperimentConfig:
    """Parse a JSON config document from a path ('-' reads stdin)."""
    overrides = None
    if path_or_text is not None:
        if path_or_text == "-":
            import sys
            text = sys.stdin.read()
        else:
            with open(path_or_text) as f:
                text = f.read()
        text = text.strip()
        overrides = json.loads(text) if text else {}
        if not isinstance(overrides, dict):
            raise ConfigError("config document must be a JSON object")
    return parse_config_dict(overrides, preset)


# Desk-scale presets. The two-client presets follow the linear analysis
# setting (one benign + one malicious client) with the benign client holding
# the larger non-i.i.d. shard; inversion uses a stronger mask penalty and a
# mask-size sanity filter so hardening trains only on backdoor-like triggers.
_TWO_CLIENT_FED = {
    "num_clients": 2,
    "clients_per_round": 2,
    "num_adversaries": 1,
    "partition": "sized",
    "shard_fractions": [0.6, 0.4],
}

_DESK_INVERSION = {
    "mask_weight": 1e-2,
    "trigger_size_limit": 0.15,
}

PRESETS: dict[str, dict] = {
    "theory-harness": {
        "theory": {"defense_enabled": True},
    },
    "continuous-mnist": {
        "seed": 2,
        "federation": {
            **_TWO_CLIENT_FED,
            "attack_mode": "continuous",
            "attack_start_round": 30,
            "defense": "flip",
            "defense_start_round": 33,
            "total_rounds": 70,
            "tau": 0.3,
        },
        "inversion": _DESK_INVERSION,
    },
    "single-shot-mnist": {
        "seed": 2,
        "federation": {
            **_TWO_CLIENT_FED,
            "attack_mode": "single_shot",
            "attack_start_round": 30,
            "defense": "flip",
            "defense_start_round": 31,
            "total_rounds": 45,
            "scale_factor": 4.0,
            "tau": 0.0,
        },
        "inversion": _DESK_INVERSION,
    },
    "adaptive": {
        "seed": 2,
        "federation": {
            **_TWO_CLIENT_FED,
            "attack_mode": "adaptive",
            "attack_start_round": 30,
            "defense": "flip",
            "defense_start_round": 33,
            "total_rounds": 70,
            "tau": 0.3,
        },
        "inversion": _DESK_INVERSION,
    },
    "trigger-size-sweep": {
        "seed": 2,
        "federation": {
            **_TWO_CLIENT_FED,
            "attack_mode": "continuous",
            "attack_start_round": 30,
            "defense": "flip",
            "defense_start_round": 33,
            "total_rounds": 70,
            "tau": 0.3,
        },
        "inversion": _DESK_INVERSION,
        "sweeps": {"trigger_sides": [2, 4, 6, 8]},
    },
    "alpha-sweep": {
        "federation": {
            "num_clients": 20,
            "clients_per_round": 5,
            "num_adversaries": 2,
            "attack_mode": "continuous",
            "attack_start_round": 15,
            "defense": "flip",
            "defense_start_round": 17,
            "total_rounds": 35,
            "tau": 0.3,
        },
        "inversion": _DESK_INVERSION,
        "sweeps": {"dirichlet_alphas": [0.2, 0.5, 1.0, 2.0]},
    },
}
