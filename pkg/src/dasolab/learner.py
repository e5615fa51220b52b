"""Losses, the DASO training step and the baseline learners built on it."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .blend import PseudoLabelTracker, blend, record_predictions
from .config import LossConfig, RunConfig
from .datagen import AugmentSpec, DatasetBundle, augment, generate_dataset
from .errors import ConfigError, DasoError, NumericError, WarmupIncomplete
from .nn_core import (
    Batches,
    LossSpec,
    ModelParams,
    OptState,
    composite_loss,
    ema_forward,
    encode,
    forward,
    init_model,
    sgd_step,
    softmax,
    softmax_ce,
    update_ema_model,
)
from .proto_bank import (
    FeatureBatch,
    PrototypeBank,
    enqueue_labeled,
    prototype_matrix,
    semantic_probs,
    semantic_probs_batch,
)

__all__ = [
    "LossConfig",
    "TrainState",
    "StepMetrics",
    "RunResult",
    "unsup_loss_fixmatch",
    "align_loss",
    "adjust_logits_la",
    "init_state",
    "plan_step",
    "train_step",
    "run_training",
    "component_rng",
]

# fixed offsets so each source of randomness gets its own stream
SEED_OFFSETS = {"data": 101, "init": 202, "augment": 303, "sampling": 404}

_DASO_BLEND_MODES = ("fixmatch_daso", "blend_const", "pseudolabel_daso", "meanteacher_daso")
_ALIGN_MODES = ("fixmatch_daso", "blend_const")


def component_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, SEED_OFFSETS[name]])


# --- per-sample loss terms -------------------------------------------------


def unsup_loss_fixmatch(target, logits_strong, confidence: float, tau: float):
    """Masked cross-entropy ``1(confidence >= tau) * H(target, softmax(logits_strong))``.

    Returns ``(loss, mask, dloss/dlogits_strong)``.
    """
    mask = int(confidence >= tau)
    loss, dlog = softmax_ce(target, logits_strong)
    return mask * loss, mask, mask * dlog


def align_loss(q_weak, z_strong, bank: PrototypeBank):
    """``H(q_weak, q_strong)`` where ``q_strong`` is the semantic prediction for
    ``z_strong``. Returns ``(loss, dloss/dz_strong)``; before every queue holds
    a feature the term is skipped and ``(0.0, None)`` is returned."""
    try:
        C = prototype_matrix(bank)
    except WarmupIncomplete:
        return 0.0, None
    q_weak = np.asarray(q_weak, dtype=np.float64)
    z = np.asarray(z_strong, dtype=np.float64)
    q_strong = semantic_probs(z, bank)
    loss = -float(np.sum(np.where(q_weak > 0, q_weak * np.log(q_strong), 0.0)))
    # chain rule through cosine similarity; prototypes are constants
    zn = np.linalg.norm(z)
    c_unit = C / np.linalg.norm(C, axis=1, keepdims=True)
    sims = c_unit @ z / zn
    ds = (q_strong - q_weak) / bank.T_proto
    dz = (c_unit.T @ ds) / zn - (ds @ sims) * z / zn**2
    return loss, dz


def adjust_logits_la(logits, n_counts, la_tau: float):
    """Logit-adjusted CE offsets: ``logits_k + la_tau * log n_k``."""
    n = np.asarray(n_counts, dtype=np.float64)
    if np.any(n < 1):
        raise ConfigError("logit adjustment needs at least one label per class", "loss.la_enabled")
    return np.asarray(logits, dtype=np.float64) + la_tau * np.log(n)


# --- state -----------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    loss: float
    loss_cls: float
    loss_u: float
    loss_align: float
    mask_rate: float
    lambda_u: float
    blended: bool
    align_active: bool
    m_hat: np.ndarray
    upsilon: np.ndarray


@dataclass
class TrainState:
    model: ModelParams
    opt: OptState
    bank: PrototypeBank
    tracker: PseudoLabelTracker
    t: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    la_offset: np.ndarray | None = None


def init_state(cfg: RunConfig, n_counts) -> TrainState:
    K = cfg.dataset.K
    model = init_model(cfg.layer_dims, K, int(component_rng(cfg.run.seed, "init").integers(2**31)))
    o = cfg.optim
    opt = OptState(lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay, nesterov=o.nesterov)
    b = cfg.bank
    caps = None
    if not b.balanced:
        n = np.asarray(n_counts, dtype=np.float64)
        caps = np.maximum(1, np.floor(b.L * n / n.max() + 0.5)).astype(int)
    bank = PrototypeBank(K, cfg.model.feature_dim, b.L, b.T_proto, capacities=caps,
                         require_ema=b.use_ema_encoder)
    tracker = PseudoLabelTracker(K, cfg.tracker.segment_len, cfg.tracker.T_dist, cfg.tracker.mode)
    la = None
    if cfg.loss.la_enabled:
        la = adjust_logits_la(np.zeros(K), n_counts, cfg.loss.la_tau)
    return TrainState(model, opt, bank, tracker, 0, component_rng(cfg.run.seed, "augment"), la)


def _lambda_u(cfg: LossConfig, t: int, total_steps: int | None) -> float:
    if cfg.ramp_up is None or not total_steps:
        return cfg.lambda_u
    return cfg.lambda_u * min(1.0, t / (cfg.ramp_up * total_steps))


def _upsilon(state: TrainState, cfg: LossConfig) -> np.ndarray:
    if cfg.learner_mode == "blend_const":
        return np.full(state.tracker.K, cfg.blend_value)
    return state.tracker.upsilon


def _prototypes_ready(bank: PrototypeBank):
    if not bank.warm:
        return None
    C = prototype_matrix(bank)
    if np.any(np.linalg.norm(C, axis=1) == 0):
        return None
    return C


def pseudo_labels(state: TrainState, u_view, cfg: LossConfig, teacher: bool = False):
    """Linear, semantic and final pseudo-labels for a batch of unlabeled views.

    Returns ``(p_hat, q_hat, p_final, valid, blended)``; ``q_hat`` is None when
    the bank is not warm. ``teacher`` switches to the full EMA network.
    """
    if teacher:
        z, logits = ema_forward(state.model, u_view)
    else:
        z, logits = forward(state.model, u_view)
    p_hat = softmax(logits)
    C = _prototypes_ready(state.bank) if cfg.learner_mode in _DASO_BLEND_MODES + _ALIGN_MODES else None
    q_hat = valid = None
    if C is not None:
        q_hat, valid = semantic_probs_batch(z, C, state.bank.T_proto)
    blended = cfg.learner_mode in _DASO_BLEND_MODES and C is not None and state.t >= cfg.P
    if blended:
        p_final = np.where(valid[:, None], blend(p_hat, q_hat, _upsilon(state, cfg)), p_hat)
    else:
        p_final = p_hat
    return p_hat, q_hat, p_final, valid, blended


@dataclass
class StepPlan:
    """Everything one step feeds to the optimiser, targets already frozen."""

    spec: LossSpec
    batches: Batches
    p_hat: np.ndarray
    q_hat: np.ndarray | None
    p_final: np.ndarray
    mask: np.ndarray
    lambda_u: float
    blended: bool
    align_active: bool


def plan_step(state: TrainState, labeled_batch, unlabeled_batch, cfg: LossConfig,
              aug: AugmentSpec, total_steps: int | None = None) -> StepPlan:
    """Augment, refresh the prototype bank and build pseudo-label targets.

    Mutates the bank and consumes the augmentation stream, nothing else.
    """
    x, y = labeled_batch
    u = np.asarray(unlabeled_batch, dtype=np.float64)
    model, rng, mode = state.model, state.rng, cfg.learner_mode
    K = model.num_classes

    # views are always drawn in the same order so modes share random streams
    x_w = augment(x, aug, "weak", rng=rng)
    u_w = augment(u, aug, "weak", rng=rng)
    u_s = augment(u, aug, "strong", rng=rng)

    if mode in _DASO_BLEND_MODES or mode in _ALIGN_MODES:
        use_ema = state.bank.require_ema
        layers = model.ema_encoder_layers if use_ema else model.encoder_layers
        enqueue_labeled(state.bank, FeatureBatch(encode(layers, x_w), use_ema), y)

    lam_u = _lambda_u(cfg, state.t, total_steps)
    lam_align = cfg.lambda_align if mode in _ALIGN_MODES else 0.0
    if mode == "supervised":
        lam_u = lam_align = 0.0

    if mode in ("meanteacher", "meanteacher_daso"):
        p_hat, q_hat, p_final, valid, blended = pseudo_labels(state, u_w, cfg, teacher=True)
        student_view = augment(u, aug, "weak", rng=rng)
        target, mask, unsup = p_final, np.ones(len(u)), "mse"
    else:
        p_hat, q_hat, p_final, valid, blended = pseudo_labels(state, u_w, cfg)
        conf = (p_final if cfg.mask_source == "blended" else p_hat).max(axis=1)
        mask = (conf >= cfg.tau).astype(np.float64)
        unsup = "ce"
        if mode in ("pseudolabel", "pseudolabel_daso"):
            student_view = u_w
            target = np.eye(K)[np.argmax(p_final, axis=1)]
        else:
            student_view = u_s
            target = p_final

    align_active = lam_align > 0 and q_hat is not None and state.t >= cfg.P
    spec = LossSpec(
        lambda_u=lam_u,
        lambda_align=lam_align if align_active else 0.0,
        unsup=unsup,
        T_proto=state.bank.T_proto,
        la_offset=state.la_offset,
    )
    batches = Batches(
        x=x_w,
        y=np.eye(K)[np.asarray(y, dtype=int)],
        u=student_view,
        u_target=target,
        u_mask=mask,
        align_target=q_hat if align_active else None,
        prototypes=prototype_matrix(state.bank) if align_active else None,
        align_mask=valid if align_active else None,
    )
    return StepPlan(spec, batches, p_hat, q_hat, p_final, mask, lam_u, bool(blended), bool(align_active))


def train_step(state: TrainState, labeled_batch, unlabeled_batch, cfg: LossConfig,
               aug: AugmentSpec, rho: float = 0.999, total_steps: int | None = None):
    """One optimisation step. ``labeled_batch`` is ``(x, y)``; ``unlabeled_batch``
    carries inputs only."""
    plan = plan_step(state, labeled_batch, unlabeled_batch, cfg, aug, total_steps)
    try:
        res = composite_loss(state.model, plan.spec, plan.batches)
    except NumericError as exc:
        exc.step = state.t
        raise
    sgd_step(state.model, res.grads, state.opt)
    update_ema_model(state.model, rho)

    preds = np.argmax(plan.p_final, axis=1)
    record_predictions(state.tracker, preds if cfg.track_unmasked else preds[plan.mask > 0])
    out = StepMetrics(
        step=state.t,
        loss=res.loss,
        loss_cls=res.terms["cls"],
        loss_u=res.terms["u"],
        loss_align=res.terms["align"],
        mask_rate=float(plan.mask.mean()) if len(plan.mask) else 0.0,
        lambda_u=plan.lambda_u,
        blended=plan.blended,
        align_active=plan.align_active,
        m_hat=state.tracker.m_hat.copy(),
        upsilon=_upsilon(state, cfg),
    )
    state.t += 1
    return state, out


# --- experiment loop -------------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    history: list[dict]
    summary: dict
    status: str = "ok"
    error: str | None = None
    wall_clock: float = 0.0


def _eval_record(state: TrainState, bundle: DatasetBundle, cfg: RunConfig, window: list[StepMetrics]):
    report = metrics.evaluate(state.model, bundle.test_x, bundle.test_y, use_ema=True)
    teacher = cfg.loss.learner_mode.startswith("meanteacher")
    _, _, p_final, _, _ = pseudo_labels(state, bundle.unlabeled_x, cfg.loss, teacher=teacher)
    preds = np.argmax(p_final, axis=1)
    conf_mask = p_final.max(axis=1) >= cfg.loss.tau
    hidden = bundle.unlabeled_hidden_y
    K = cfg.dataset.K
    rec = {
        "step": state.t,
        "eval": report,
        "pl_masked": metrics.pl_quality_arrays(preds, conf_mask, hidden, K),
        "pl_all": metrics.pl_quality_arrays(preds, np.ones(len(preds)), hidden, K),
        "m_hat": state.tracker.m_hat.copy(),
        "upsilon": _upsilon(state, cfg.loss),
    }
    if window:
        for key in ("loss", "loss_cls", "loss_u", "loss_align", "mask_rate"):
            rec[key] = float(np.mean([getattr(m, key) for m in window]))
    return rec


def summarize(history: list[dict], cfg: RunConfig) -> dict:
    if not history:
        return {}
    mino = metrics.minority_classes(cfg.dataset.K)
    last = history[-1]
    bal = [h["eval"].balanced_acc for h in history]
    return {
        "balanced_acc_median20": metrics.median_last_k(bal, cfg.run.median_k),
        "minority_acc_median20": metrics.median_last_k([h["eval"].minority_acc for h in history], cfg.run.median_k),
        "per_class_acc": [float(v) for v in last["eval"].per_class_acc],
        "pl_recall_minority": float(np.mean(last["pl_all"].recall[mino])),
        "pl_precision_minority": _nanmean(last["pl_all"].precision[mino]),
        "pl_recall_minority_masked": float(np.mean(last["pl_masked"].recall[mino])),
        "pl_precision_minority_masked": _nanmean(last["pl_masked"].precision[mino]),
    }


def _nanmean(v):
    v = np.asarray(v, dtype=np.float64)
    return None if np.all(np.isnan(v)) else float(np.nanmean(v))


def run_training(cfg: RunConfig, progress=None) -> RunResult:
    """Train from scratch and evaluate every ``eval_interval`` steps."""
    cfg.validate()
    start = time.perf_counter()
    seed = cfg.run.seed
    data_seed = int(component_rng(seed, "data").integers(2**31)) + cfg.dataset.seed
    bundle = generate_dataset(cfg.dataset, seed=data_seed)
    state = init_state(cfg, bundle.N_counts)
    sampler = component_rng(seed, "sampling")
    B = cfg.optim.batch_size
    UB = cfg.optim.mu * B
    n_l, n_u = len(bundle.labeled_y), len(bundle.unlabeled_x)

    history = [_eval_record(state, bundle, cfg, [])]
    window: list[StepMetrics] = []
    status, error = "ok", None
    try:
        for _ in range(cfg.run.total_steps):
            li = sampler.integers(n_l, size=B)
            ui = sampler.integers(n_u, size=UB) if n_u else np.zeros(0, dtype=int)
            _, m = train_step(
                state,
                (bundle.labeled_x[li], bundle.labeled_y[li]),
                bundle.unlabeled_x[ui],
                cfg.loss,
                cfg.augment,
                rho=cfg.model.rho,
                total_steps=cfg.run.total_steps,
            )
            window.append(m)
            if state.t % cfg.run.eval_interval == 0:
                history.append(_eval_record(state, bundle, cfg, window))
                window = []
                if progress is not None:
                    progress(history[-1])
    except DasoError as exc:
        status, error = "failed", f"{type(exc).__name__}: {exc}"
    return RunResult(cfg, history, summarize(history, cfg), status, error, time.perf_counter() - start)
