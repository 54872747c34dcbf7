"""Executable loss-change bounds, the robustness-condition certificate, and
rejection-count forecasts, plus a two-client harness that checks them against
the live simulator in the linear analysis setting.

Conventions: x is a row sample (1, d) or batch (n, d); W maps (d, I); the
loss difference compared everywhere is with-defense minus without-defense.
The harness composes triggers additively (z = x + v) so that recovery error
enters as an exact vector difference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset, square_patch_trigger
from .inversion import InversionConfig, invert_trigger
from .model import LinearModel, SgdConfig, gradient, train_sgd, zeros_model
from .numerics import SeededRng, softmax

BOUND_TOL = 1e-9


class DegenerateCertificateError(ValueError):
    """The robustness-condition denominator vanishes (alpha undefined)."""


@dataclass
class BoundPair:
    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper + 1e-15:
            raise ValueError("lower bound exceeds upper bound")


@dataclass
class RobustnessCertificate:
    alpha: float
    b: np.ndarray                # sign vector, entries in {-1, +1}
    max_loss_cap: float          # aggregate clean-side cap, constant in eps
    numerator: float
    direction_weights: np.ndarray  # u: f(eps) = numerator - eps . u

    def min_loss_at(self, eps: np.ndarray) -> float:
        """Aggregate backdoor-side lower bound as a function of recovery error."""
        return float(self.numerator - np.asarray(eps, dtype=np.float64) @ self.direction_weights)


@dataclass
class RejectionForecast:
    r_b: int        # rejected backdoor samples, no defense
    r_b_prime: int  # rejected backdoor samples, with defense (forecast)
    r_c: int
    r_c_prime: int
    flagged: bool   # some per-sample bound allowed a loss decrease

    @property
    def r_bd(self) -> int:
        return self.r_b_prime - self.r_b

    @property
    def r_bn(self) -> int:
        return self.r_c_prime - self.r_c


def _logit_rows(xs: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.asarray(xs, dtype=np.float64)) @ w


def loss_diff_bounds(x: np.ndarray, q: np.ndarray, delta_w: np.ndarray) -> BoundPair:
    """Closed-form bounds on the per-sample loss change for weight delta W'-W."""
    q = np.asarray(q, dtype=np.float64)
    if not (np.isclose(q.sum(), 1.0) and np.isclose(q.max(), 1.0) and (q >= 0).all()):
        raise ValueError("q must be one-hot")
    row = _logit_rows(x, np.asarray(delta_w, dtype=np.float64))[0]
    anchor = float(q @ row)
    return BoundPair(lower=float(row.min() - anchor), upper=float(row.max() - anchor))


def bound_pairs_batch(xs: np.ndarray, labels: np.ndarray, delta_w: np.ndarray,
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-sample (lower, upper) bounds for one-hot labels."""
    rows = _logit_rows(xs, delta_w)
    anchor = rows[np.arange(len(rows)), np.asarray(labels, dtype=np.int64)]
    return rows.min(axis=1) - anchor, rows.max(axis=1) - anchor


def sample_loss(x: np.ndarray, q_index: int, w: np.ndarray) -> float:
    """Stable cross-entropy -ln softmax(xW)[q] via logsumexp."""
    row = _logit_rows(x, w)[0]
    mx = row.max()
    return float(np.log(np.exp(row - mx).sum()) + mx - row[q_index])


def sample_losses_batch(xs: np.ndarray, labels: np.ndarray, w: np.ndarray) -> np.ndarray:
    rows = _logit_rows(xs, w)
    mx = rows.max(axis=1)
    lse = np.log(np.exp(rows - mx[:, None]).sum(axis=1)) + mx
    picked = rows[np.arange(len(rows)), np.asarray(labels, dtype=np.int64)]
    return lse - picked


def verify_bounds(x: np.ndarray, q: np.ndarray, w: np.ndarray, w_prime: np.ndarray,
                  tol: float = BOUND_TOL) -> tuple[bool, dict]:
    """Check lower - tol <= L' - L <= upper + tol for one sample.

    Returns (ok, report); on violation the report carries the three values.
    """
    q = np.asarray(q, dtype=np.float64)
    qi = int(q.argmax())
    pair = loss_diff_bounds(x, q, np.asarray(w_prime) - np.asarray(w))
    diff = sample_loss(x, qi, w_prime) - sample_loss(x, qi, w)
    ok = (pair.lower - tol) <= diff <= (pair.upper + tol)
    report = {"lower": pair.lower, "upper": pair.upper, "diff": diff, "ok": ok}
    if not ok:
        report["x"] = np.asarray(x).tolist()
        report["q_index"] = qi
    return ok, report


def count_bound_violations(xs: np.ndarray, labels: np.ndarray, w: np.ndarray,
                           w_prime: np.ndarray, tol: float = BOUND_TOL) -> int:
    lower, upper = bound_pairs_batch(xs, labels, np.asarray(w_prime) - np.asarray(w))
    diff = sample_losses_batch(xs, labels, w_prime) - sample_losses_batch(xs, labels, w)
    return int(((diff < lower - tol) | (diff > upper + tol)).sum())


def one_step_weight_delta(aug_inputs: np.ndarray, aug_labels: np.ndarray,
                          w: np.ndarray, learning_rate: float) -> np.ndarray:
    """Exact W' - W for one local update extended with the augmented set:
    -lr * sum_j z_j^T (p(z_j) - Y_j), probabilities taken at the incoming w."""
    z = np.atleast_2d(np.asarray(aug_inputs, dtype=np.float64))
    if len(z) == 0:
        raise ValueError("empty augmented set")
    y = np.asarray(aug_labels, dtype=np.int64)
    p = softmax(z @ np.asarray(w, dtype=np.float64))
    p[np.arange(len(y)), y] -= 1.0
    return -learning_rate * (z.T @ p)


def build_qstar(xs: np.ndarray, delta_w: np.ndarray, mode: str) -> np.ndarray:
    """One-hot rows at argmin ('min') or argmax ('max') of x (W'-W); ties
    break to the lowest class index."""
    rows = _logit_rows(xs, delta_w)
    idx = rows.argmin(axis=1) if mode == "min" else rows.argmax(axis=1)
    out = np.zeros_like(rows)
    out[np.arange(len(rows)), idx] = 1.0
    return out


def robustness_alpha(bd_inputs: np.ndarray, target_label: int, eps: np.ndarray,
                     aug_z: np.ndarray, aug_labels: np.ndarray, aug_probs: np.ndarray,
                     learning_rate: float, clean_inputs: np.ndarray,
                     clean_labels: np.ndarray) -> RobustnessCertificate:
    """Certificate radius alpha, sign vector b, and the clean-side cap.

    `bd_inputs` are the ground-truth-stamped backdoor samples (x_s + v_true);
    `aug_z` the defender's augmented samples (x_j + v_rec) with true labels
    and softmax probabilities evaluated at the incoming weights.
    """
    bd = np.atleast_2d(np.asarray(bd_inputs, dtype=np.float64))
    z_aug = np.atleast_2d(np.asarray(aug_z, dtype=np.float64))
    y_aug = np.asarray(aug_labels, dtype=np.int64)
    p_aug = np.asarray(aug_probs, dtype=np.float64)

    q_onehot = np.zeros((len(y_aug), p_aug.shape[1]))
    q_onehot[np.arange(len(y_aug)), y_aug] = 1.0
    delta_w = learning_rate * (z_aug.T @ (q_onehot - p_aug))  # = W' - W

    qstar = build_qstar(bd, delta_w, "min")
    q_bd = np.zeros_like(qstar)
    q_bd[:, target_label] = 1.0
    coeff = (qstar - q_bd).sum(axis=0)  # (I,) summed over backdoor samples

    z_s = bd + np.asarray(eps, dtype=np.float64)
    numerator = float(((z_s @ delta_w) * (qstar - q_bd)).sum())
    u = delta_w @ coeff  # (d,)
    b = np.where(u >= 0.0, 1.0, -1.0)
    denominator = float(b @ u)
    if abs(denominator) < 1e-12:
        raise DegenerateCertificateError("sign-weighted denominator is zero (q* == q)")
    alpha = numerator / denominator

    cl = np.atleast_2d(np.asarray(clean_inputs, dtype=np.float64))
    qstar_max = build_qstar(cl, delta_w, "max")
    q_cl = np.zeros_like(qstar_max)
    q_cl[np.arange(len(cl)), np.asarray(clean_labels, dtype=np.int64)] = 1.0
    cap = float(((cl @ delta_w) * (qstar_max - q_cl)).sum())

    return RobustnessCertificate(alpha=alpha, b=b, max_loss_cap=cap,
                                 numerator=numerator, direction_weights=u)


def rejection_forecast(clean_losses: np.ndarray, clean_uppers: np.ndarray,
                       bd_losses: np.ndarray, bd_lowers: np.ndarray,
                       tau: float) -> RejectionForecast:
    """Indicator-sum rejection forecasts under the loss threshold L_tau = -ln tau.

    Per-sample losses are taken on the no-defense model; the backdoor side
    adds each sample's lower bound, the benign side its upper bound.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    l_tau = -np.log(tau)
    cl = np.asarray(clean_losses, dtype=np.float64)
    cu = np.asarray(clean_uppers, dtype=np.float64)
    bl = np.asarray(bd_losses, dtype=np.float64)
    bb = np.asarray(bd_lowers, dtype=np.float64)
    return RejectionForecast(
        r_b=int((bl > l_tau).sum()),
        r_b_prime=int((bl + bb > l_tau).sum()),
        r_c=int((cl > l_tau).sum()),
        r_c_prime=int((cl + cu > l_tau).sum()),
        flagged=bool((bb < 0).any() or (cu < 0).any()),
    )


@dataclass
class TheoryConfig:
    """Pinned two-client analysis setting (one benign, one malicious)."""

    benign_share: float = 0.55
    converge_rounds: int = 20
    implant_rounds: int = 5
    implant_mode: str = "continuous"  # continuous | single_shot
    benign_lr: float = 0.1
    poison_lr: float = 0.05
    batch_size: int = 64
    epochs: int = 5
    poison_count: int = 20
    bound_lr: float = 2e-4
    tau: float = 0.3
    trigger_side: int = 4
    target_label: int = 2
    defense_enabled: bool = True
    mc_draws: int = 1000
    max_aug_samples: int | None = None

    def __post_init__(self):
        if not 0 < self.benign_share < 1:
            raise ValueError("benign_share must lie in (0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")


@dataclass
class TheoryReport:
    bound_violations_bd: int
    bound_violations_clean: int
    branch_delta_max_err: float
    forecast: RejectionForecast
    forecast_recount_equal: bool
    measured_loss_rejections: dict
    measured_confidence: dict
    table_counts: dict
    certificate: dict
    tau: float
    per_sample: dict | None = None  # flag-gated (lower, upper, diff) triples

    def as_dict(self) -> dict:
        out = {
            "tau": self.tau,
            "bound_violations_bd": self.bound_violations_bd,
            "bound_violations_clean": self.bound_violations_clean,
            "branch_delta_max_err": self.branch_delta_max_err,
            "forecast": {
                "r_b": self.forecast.r_b, "r_b_prime": self.forecast.r_b_prime,
                "r_c": self.forecast.r_c, "r_c_prime": self.forecast.r_c_prime,
                "r_bd": self.forecast.r_bd, "r_bn": self.forecast.r_bn,
                "flagged": self.forecast.flagged,
                "recount_equal": self.forecast_recount_equal,
            },
            "measured_loss_rejections": self.measured_loss_rejections,
            "measured_confidence": self.measured_confidence,
            "table_counts": self.table_counts,
            "certificate": self.certificate,
        }
        if self.per_sample is not None:
            out["per_sample"] = self.per_sample
        return out


def _poison_megabatch(shard: LabeledDataset, trig_vec: np.ndarray, target: int,
                      poison_frac: float, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
    xs = shard.images.copy()
    ys = shard.labels.copy()
    n_poison = int(round(poison_frac * len(xs)))
    idx = rng.choice(len(xs), size=n_poison, replace=False)
    xs[idx] = xs[idx] + trig_vec  # additive composition, matching the analysis
    ys[idx] = target
    return xs, ys


def run_theory_harness(cfg: TheoryConfig, train: LabeledDataset, test: LabeledDataset,
                       rng: SeededRng, inv: InversionConfig | None = None,
                       keep_per_sample: bool = False) -> TheoryReport:
    """Converge, implant a backdoor, then execute the two-branch (with/without
    defense) bound-check round under sum gradients and literal sum aggregation,
    evaluating every bound, forecast, and certificate on the live weights."""
    from .data import sized_partition

    inv = inv or InversionConfig(mask_weight=1e-2)
    plan = sized_partition(train, [cfg.benign_share, 1 - cfg.benign_share], rng.child(1))
    benign = train.subset(plan.shard_indices(0))
    malicious = train.subset(plan.shard_indices(1))

    trig = square_patch_trigger(train.width, train.height, cfg.trigger_side,
                                cfg.target_label)
    v_true = trig.additive()
    target = cfg.target_label

    # phase 1: converge with plain FedAvg (both clients clean, mean gradients)
    model = zeros_model(train.dim, train.num_classes, bias=False)
    g_b = len(benign) / len(train)
    g_m = len(malicious) / len(train)
    sgd_b = SgdConfig(cfg.benign_lr, cfg.batch_size, cfg.epochs)
    for r in range(cfg.converge_rounds):
        mb = train_sgd(model, benign.images, benign.labels, sgd_b, rng.child(2, r))
        mm = train_sgd(model, malicious.images, malicious.labels, sgd_b, rng.child(3, r))
        model = LinearModel(g_b * mb.weights + g_m * mm.weights)

    # phase 2: implant the backdoor (attack without defense)
    sgd_p = SgdConfig(cfg.poison_lr, cfg.batch_size, cfg.epochs)
    implants = 1 if cfg.implant_mode == "single_shot" else cfg.implant_rounds
    scale = (1.0 / g_m) if cfg.implant_mode == "single_shot" else 1.0
    for r in range(implants):
        mb = train_sgd(model, benign.images, benign.labels, sgd_b, rng.child(4, r))
        prng = rng.child(5, r)
        xs, ys = _poison_megabatch(malicious, v_true, target,
                                   cfg.poison_count / cfg.batch_size, prng)
        mm = train_sgd(model, xs, ys, sgd_p, prng.child(1))
        if scale != 1.0:
            mm = LinearModel(model.weights + scale * (mm.weights - model.weights))
        model = LinearModel(g_b * mb.weights + g_m * mm.weights)
    w_r = model.weights.copy()

    # phase 3: the defender inverts a universal trigger on the incoming weights
    src_idx = np.where(benign.labels != target)[0]
    take = min(inv.universal_source_samples, len(src_idx))
    sub = rng.child(6).choice(src_idx, size=take, replace=False)
    res = invert_trigger(model, benign.images[sub], benign.labels[sub], target,
                         inv, rng.child(7))
    v_rec = res.trigger.additive()
    eps = v_rec - v_true

    # phase 4: the bound-check round (sum gradients, one step, sum aggregation)
    if cfg.defense_enabled:
        aug_idx = np.arange(len(benign))
        if cfg.max_aug_samples is not None and len(aug_idx) > cfg.max_aug_samples:
            aug_idx = rng.child(8).choice(aug_idx, size=cfg.max_aug_samples, replace=False)
        aug_z = benign.images[aug_idx] + v_rec
        aug_y = benign.labels[aug_idx]
    else:
        aug_z = np.empty((0, train.dim))
        aug_y = np.empty(0, dtype=np.int64)

    gw_clean, _ = gradient(model, benign.images, benign.labels, mean=False)
    w1_nd = w_r - cfg.bound_lr * gw_clean
    if len(aug_z):
        gw_aug, _ = gradient(model, aug_z, aug_y, mean=False)
        w1_d = w1_nd - cfg.bound_lr * gw_aug
    else:
        w1_d = w1_nd.copy()

    prng = rng.child(9)
    xs, ys = _poison_megabatch(malicious, v_true, target,
                               cfg.poison_count / cfg.batch_size, prng)
    gw_mal, _ = gradient(model, xs, ys, mean=False)
    w_mal = w_r - cfg.bound_lr * gw_mal

    w_nd = w1_nd + w_mal  # literal sum aggregation (g_k = 1)
    w_d = w1_d + w_mal
    delta_w = w_d - w_nd

    if len(aug_z):
        predicted = one_step_weight_delta(aug_z, aug_y, w_r, cfg.bound_lr)
        branch_err = float(np.abs(delta_w - predicted).max())
    else:
        branch_err = 0.0

    # evaluation sets: additive ground-truth stamping, target label for backdoor
    keep = test.labels != target
    bd_inputs = test.images[keep] + v_true
    bd_labels = np.full(keep.sum(), target, dtype=np.int64)
    clean_inputs = test.images
    clean_labels = test.labels

    bd_lower, _ = bound_pairs_batch(bd_inputs, bd_labels, delta_w)
    _, clean_upper = bound_pairs_batch(clean_inputs, clean_labels, delta_w)

    bd_loss_nd = sample_losses_batch(bd_inputs, bd_labels, w_nd)
    bd_loss_d = sample_losses_batch(bd_inputs, bd_labels, w_d)
    cl_loss_nd = sample_losses_batch(clean_inputs, clean_labels, w_nd)
    cl_loss_d = sample_losses_batch(clean_inputs, clean_labels, w_d)

    viol_bd = count_bound_violations(bd_inputs, bd_labels, w_nd, w_d)
    viol_cl = count_bound_violations(clean_inputs, clean_labels, w_nd, w_d)

    forecast = rejection_forecast(cl_loss_nd, clean_upper, bd_loss_nd, bd_lower, cfg.tau)
    l_tau = -np.log(cfg.tau)
    recount_equal = (
        forecast.r_b == int((bd_loss_nd > l_tau).sum())
        and forecast.r_b_prime == int(((bd_loss_nd + bd_lower) > l_tau).sum())
        and forecast.r_c == int((cl_loss_nd > l_tau).sum())
        and forecast.r_c_prime == int(((cl_loss_nd + clean_upper) > l_tau).sum())
    )
    measured_loss = {
        "bd_rejected_nd": int((bd_loss_nd > l_tau).sum()),
        "bd_rejected_d": int((bd_loss_d > l_tau).sum()),
        "clean_rejected_nd": int((cl_loss_nd > l_tau).sum()),
        "clean_rejected_d": int((cl_loss_d > l_tau).sum()),
    }

    def conf_counts(w: np.ndarray) -> dict:
        pb = softmax(bd_inputs @ w)
        pc = softmax(clean_inputs @ w)
        return {
            "bd_rejected": int((pb.max(axis=1) < cfg.tau).sum()),
            "bd_accepted_as_target": int(((pb.argmax(axis=1) == target)
                                          & (pb.max(axis=1) >= cfg.tau)).sum()),
            "clean_rejected": int((pc.max(axis=1) < cfg.tau).sum()),
            "clean_accepted_correct": int(((pc.argmax(axis=1) == clean_labels)
                                           & (pc.max(axis=1) >= cfg.tau)).sum()),
        }

    conf_nd = conf_counts(w_nd)
    conf_d = conf_counts(w_d)
    table_counts = {
        "clean_total": int(len(clean_inputs)),
        "bd_total": int(len(bd_inputs)),
        "no_defense": {"clean_accepted_correct": conf_nd["clean_accepted_correct"],
                       "bd_accepted_as_target": conf_nd["bd_accepted_as_target"]},
        "with_defense": {"clean_accepted_correct": conf_d["clean_accepted_correct"],
                         "bd_accepted_as_target": conf_d["bd_accepted_as_target"]},
    }

    cert_info: dict = {"degenerate": True}
    if cfg.defense_enabled and len(aug_z):
        p_aug = softmax(aug_z @ w_r)
        try:
            cert = robustness_alpha(bd_inputs, target, eps, aug_z, aug_y, p_aug,
                                    cfg.bound_lr, clean_inputs, clean_labels)
            mc_rng = rng.child(10)
            worst = float("inf")
            if cert.alpha > 0:
                draws = mc_rng.random((cfg.mc_draws, train.dim)) * 2.0 - 1.0
                draws *= cert.alpha
                vals = cert.numerator - draws @ cert.direction_weights
                worst = float(min(vals.min(), cert.min_loss_at(cert.alpha * cert.b)))
            cert_info = {
                "degenerate": False,
                "alpha": cert.alpha,
                "numerator": cert.numerator,
                "max_loss_cap": cert.max_loss_cap,
                "mc_min_loss": worst,
                "eps_inf_norm": float(np.abs(eps).max()),
            }
        except DegenerateCertificateError:
            cert_info = {"degenerate": True}

    per_sample = None
    if keep_per_sample:
        _, bd_upper = bound_pairs_batch(bd_inputs, bd_labels, delta_w)
        clean_lower, _ = bound_pairs_batch(clean_inputs, clean_labels, delta_w)
        per_sample = {
            "backdoor": [[float(a), float(b), float(c)] for a, b, c in
                         zip(bd_lower, bd_upper, bd_loss_d - bd_loss_nd)],
            "clean": [[float(a), float(b), float(c)] for a, b, c in
                      zip(clean_lower, clean_upper, cl_loss_d - cl_loss_nd)],
        }

    return TheoryReport(
        bound_violations_bd=viol_bd,
        bound_violations_clean=viol_cl,
        branch_delta_max_err=branch_err,
        forecast=forecast,
        forecast_recount_equal=recount_equal,
        measured_loss_rejections=measured_loss,
        measured_confidence={"no_defense": conf_nd, "with_defense": conf_d},
        table_counts=table_counts,
        certificate=cert_info,
        tau=cfg.tau,
        per_sample=per_sample,
    )
