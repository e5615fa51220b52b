"""Micro MLP engine: forward pass, hand-derived gradients, SGD and EMA.

Weights are stored as ``(W, b)`` pairs with ``W`` of shape ``(fan_in, fan_out)``
so a layer computes ``x @ W + b``. Every encoder layer is followed by a ReLU;
the classifier is a single affine map from the feature dimension to K logits.
Everything is float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

Layer = tuple[np.ndarray, np.ndarray]


def _copy_layers(layers: list[Layer]) -> list[Layer]:
    return [(w.copy(), b.copy()) for w, b in layers]


@dataclass
class ModelParams:
    encoder_layers: list[Layer]
    classifier: Layer
    ema_encoder_layers: list[Layer]
    # EMA shadow of the classifier; only read by the full EMA network
    # (evaluation and the MeanTeacher target).
    ema_classifier: Layer

    @property
    def input_dim(self) -> int:
        return self.encoder_layers[0][0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.encoder_layers[-1][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier[0].shape[1]

    def trainable(self) -> list[np.ndarray]:
        """Flat list of trainable arrays (encoder then classifier), by reference."""
        out = []
        for w, b in self.encoder_layers:
            out.extend((w, b))
        out.extend(self.classifier)
        return out

    def ema_arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.ema_encoder_layers:
            out.extend((w, b))
        out.extend(self.ema_classifier)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            _copy_layers(self.encoder_layers),
            (self.classifier[0].copy(), self.classifier[1].copy()),
            _copy_layers(self.ema_encoder_layers),
            (self.ema_classifier[0].copy(), self.ema_classifier[1].copy()),
        )


@dataclass
class Grads:
    """Gradients shaped like the trainable part of :class:`ModelParams`."""

    encoder_layers: list[Layer]
    classifier: Layer

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.encoder_layers:
            out.extend((w, b))
        out.extend(self.classifier)
        return out

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Grads":
        return cls(
            [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.encoder_layers],
            (np.zeros_like(params.classifier[0]), np.zeros_like(params.classifier[1])),
        )


@dataclass
class OptState:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    velocity: list[np.ndarray] | None = None


def init_model(layer_dims: list[int], K: int, seed: int) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``layer_dims`` is ``[input_dim, hidden..., feature_dim]``; a single entry
    means an identity-width encoder is not built, so at least two are needed.
    """
    if not layer_dims or len(layer_dims) < 2:
        raise ConfigError("layer_dims needs an input and a feature dimension", "model.layer_dims")
    if any(int(d) < 1 for d in layer_dims):
        raise ConfigError("layer dimensions must be positive", "model.layer_dims")
    if K < 2:
        raise ConfigError("need at least two classes", "dataset.K")
    rng = np.random.default_rng(seed)

    def make(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    enc = [make(a, b) for a, b in zip(layer_dims[:-1], layer_dims[1:])]
    cls = make(layer_dims[-1], K)
    return ModelParams(enc, cls, _copy_layers(enc), (cls[0].copy(), cls[1].copy()))


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.input_dim:
        raise ShapeError(f"input of shape {x.shape} does not match input dim {params.input_dim}")
    return x


def encode(layers: list[Layer], x: np.ndarray) -> np.ndarray:
    h = x
    for w, b in layers:
        h = np.maximum(h @ w + b, 0.0)
    return h


def _encode_cached(layers: list[Layer], x: np.ndarray):
    cache = []
    h = x
    for w, b in layers:
        pre = h @ w + b
        cache.append((h, pre))
        h = np.maximum(pre, 0.0)
    return h, cache


def _encode_backward(layers: list[Layer], cache, dz: np.ndarray) -> list[Layer]:
    grads = []
    g = dz
    for (w, _), (h_in, pre) in zip(reversed(layers), reversed(cache)):
        g = g * (pre > 0)
        grads.append((h_in.T @ g, g.sum(axis=0)))
        g = g @ w.T
    return grads[::-1]


def forward(params: ModelParams, x, use_ema_encoder: bool = False):
    """Return ``(z, logits)`` for a single input vector or a batch of rows.

    With ``use_ema_encoder`` the features come from the EMA encoder and are
    passed through the live classifier.
    """
    x = _check_input(params, x)
    layers = params.ema_encoder_layers if use_ema_encoder else params.encoder_layers
    z = encode(layers, x)
    w, b = params.classifier
    return z, z @ w + b


def ema_forward(params: ModelParams, x):
    """The full EMA network: EMA encoder composed with the EMA classifier."""
    x = _check_input(params, x)
    z = encode(params.ema_encoder_layers, x)
    w, b = params.ema_classifier
    return z, z @ w + b


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(target, logits):
    """Cross-entropy of ``softmax(logits)`` against a probability target.

    Returns ``(loss, dloss/dlogits)``.
    """
    target = np.asarray(target, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"target {target.shape} vs logits {logits.shape}")
    if np.any(target < 0) or abs(target.sum() - 1.0) > 1e-9:
        raise ContractError("target must be a probability vector")
    logp = log_softmax(logits)
    # 0 * log p is taken as 0 even when p underflows
    loss = -float(np.sum(np.where(target > 0, target * logp, 0.0)))
    return loss, np.exp(logp) - target


def cosine_similarity(z: np.ndarray, c: np.ndarray):
    """Row-wise cosine similarity of ``z`` (n, D) to each row of ``c`` (K, D).

    Returns ``(sims, z_norm, c_unit)``; callers must have excluded zero norms.
    """
    z_norm = np.linalg.norm(z, axis=-1)
    c_unit = c / np.linalg.norm(c, axis=-1, keepdims=True)
    return (z @ c_unit.T) / z_norm[..., None], z_norm, c_unit


# --- composite loss -------------------------------------------------------


@dataclass
class LossSpec:
    """Weights and knobs of the composite objective ``cls + lu*u + la*align``.

    ``unsup`` selects the consistency term: ``"ce"`` (masked cross-entropy to a
    stop-gradient target, FixMatch/PseudoLabel) or ``"mse"`` (squared error
    between probability vectors, MeanTeacher).
    """

    lambda_u: float = 1.0
    lambda_align: float = 1.0
    unsup: str = "ce"
    T_proto: float = 0.05
    la_offset: np.ndarray | None = None


@dataclass
class Batches:
    """Inputs and frozen targets for one evaluation of the composite loss.

    ``u`` is the unlabeled view whose live prediction is regularised; the
    alignment term reuses the same view's features. Targets are constants.
    """

    x: np.ndarray | None = None
    y: np.ndarray | None = None
    u: np.ndarray | None = None
    u_target: np.ndarray | None = None
    u_mask: np.ndarray | None = None
    align_target: np.ndarray | None = None
    prototypes: np.ndarray | None = None
    align_mask: np.ndarray | None = None


class LossResult(NamedTuple):
    loss: float
    grads: Grads
    terms: dict


def _finite(value, term):
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite value", term=term)


def composite_loss(params: ModelParams, spec: LossSpec, batches: Batches) -> LossResult:
    grads = Grads.zeros_like(params)
    terms = {"cls": 0.0, "u": 0.0, "align": 0.0}
    wc, bc = params.classifier
    dwc, dbc = grads.classifier

    def accumulate(enc_grads):
        for (gw, gb), (dw, db) in zip(grads.encoder_layers, enc_grads):
            gw += dw
            gb += db

    if batches.x is not None and len(batches.x):
        x = _check_input(params, batches.x)
        y = np.asarray(batches.y, dtype=np.float64)
        if y.shape != (len(x), params.num_classes):
            raise ShapeError(f"labeled targets {y.shape} do not match batch")
        z, cache = _encode_cached(params.encoder_layers, x)
        logits = z @ wc + bc
        if spec.la_offset is not None:
            logits = logits + spec.la_offset
        logp = log_softmax(logits)
        loss_cls = -float(np.sum(np.where(y > 0, y * logp, 0.0))) / len(x)
        _finite(loss_cls, "cls")
        terms["cls"] = loss_cls
        dlog = (np.exp(logp) - y) / len(x)
        dwc += z.T @ dlog
        dbc += dlog.sum(axis=0)
        accumulate(_encode_backward(params.encoder_layers, cache, dlog @ wc.T))

    use_u = batches.u is not None and len(batches.u) and (spec.lambda_u != 0 or spec.lambda_align != 0)
    if use_u:
        u = _check_input(params, batches.u)
        n = len(u)
        z, cache = _encode_cached(params.encoder_layers, u)
        dz = np.zeros_like(z)
        if spec.lambda_u != 0:
            t = np.asarray(batches.u_target, dtype=np.float64)
            mask = np.ones(n) if batches.u_mask is None else np.asarray(batches.u_mask, dtype=np.float64)
            logits = z @ wc + bc
            logp = log_softmax(logits)
            prob = np.exp(logp)
            if spec.unsup == "ce":
                per = -np.sum(np.where(t > 0, t * logp, 0.0), axis=1)
                dlog = (prob - t) * mask[:, None]
            elif spec.unsup == "mse":
                diff = prob - t
                per = np.sum(diff**2, axis=1)
                v = 2.0 * diff
                dlog = prob * (v - np.sum(v * prob, axis=1, keepdims=True)) * mask[:, None]
            else:
                raise ConfigError(f"unknown unsupervised loss {spec.unsup!r}", "loss.unsup")
            loss_u = float(np.sum(per * mask)) / n
            _finite(loss_u, "u")
            terms["u"] = loss_u
            dlog *= spec.lambda_u / n
            dwc += z.T @ dlog
            dbc += dlog.sum(axis=0)
            dz += dlog @ wc.T
        if spec.lambda_align != 0 and batches.prototypes is not None:
            qt = np.asarray(batches.align_target, dtype=np.float64)
            valid = np.linalg.norm(z, axis=1) > 0
            if batches.align_mask is not None:
                valid &= np.asarray(batches.align_mask, dtype=bool)
            if valid.any():
                zv = z[valid]
                sims, znorm, c_unit = cosine_similarity(zv, np.asarray(batches.prototypes))
                logq = log_softmax(sims / spec.T_proto)
                tv = qt[valid]
                loss_align = -float(np.sum(np.where(tv > 0, tv * logq, 0.0))) / n
                _finite(loss_align, "align")
                terms["align"] = loss_align
                ds = (np.exp(logq) - tv) * (spec.lambda_align / (spec.T_proto * n))
                dzv = (ds @ c_unit) / znorm[:, None] - (np.sum(ds * sims, axis=1) / znorm**2)[:, None] * zv
                dz[valid] += dzv
        accumulate(_encode_backward(params.encoder_layers, cache, dz))

    loss = terms["cls"] + spec.lambda_u * terms["u"] + spec.lambda_align * terms["align"]
    _finite(loss, "total")
    for arr in grads.arrays():
        _finite(arr, "grad")
    return LossResult(loss, grads, terms)


def loss_and_grads(params: ModelParams, loss_spec: LossSpec, batches: Batches):
    res = composite_loss(params, loss_spec, batches)
    return res.loss, res.grads


# --- optimisation ---------------------------------------------------------


def sgd_step(params: ModelParams, grads: Grads, opt: OptState):
    """SGD with momentum, L2 weight decay and optional Nesterov lookahead.

    Updates ``params`` and ``opt.velocity`` in place and returns both.
    """
    ps = params.trainable()
    gs = grads.arrays()
    if len(ps) != len(gs):
        raise ShapeError("gradient structure does not match parameters")
    if opt.velocity is None:
        opt.velocity = [np.zeros_like(p) for p in ps]
    for p, g, v in zip(ps, gs, opt.velocity):
        if p.shape != g.shape or v.shape != p.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        d = g + opt.weight_decay * p
        v *= opt.momentum
        v += d
        if opt.nesterov:
            p -= opt.lr * (d + opt.momentum * v)
        else:
            p -= opt.lr * v
    return params, opt


def ema_update(ema_params: list[np.ndarray], params: list[np.ndarray], rho: float):
    """In-place ``e <- rho * e + (1 - rho) * p`` over matching array lists."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1], got {rho}", "bank.rho")
    if len(ema_params) != len(params):
        raise ShapeError("EMA structure does not match parameters")
    for e, p in zip(ema_params, params):
        if e.shape != p.shape:
            raise ShapeError(f"EMA shape {e.shape} vs param {p.shape}")
        e *= rho
        e += (1.0 - rho) * p
    return ema_params


def update_ema_model(params: ModelParams, rho: float) -> ModelParams:
    ema_update(params.ema_arrays(), params.trainable(), rho)
    return params


# --- gradient verification ------------------------------------------------


def _relu_pattern(params: ModelParams, batches: Batches):
    pats = []
    for inp in (batches.x, batches.u):
        if inp is None or not len(inp):
            continue
        h = np.asarray(inp, dtype=np.float64)
        for w, b in params.encoder_layers:
            pre = h @ w + b
            pats.append(pre > 0)
            h = np.maximum(pre, 0.0)
    return pats


def finite_diff_check(
    params: ModelParams,
    loss_spec: LossSpec,
    batches: Batches,
    eps: float = 1e-5,
    n_samples: int | None = None,
    seed: int = 0,
    max_kinks: int = 10,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Entries whose +/-eps perturbation flips a ReLU are resampled. With
    ``n_samples=None`` every parameter entry is checked.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive", "eps")
    work = params.copy()
    _, grads = loss_and_grads(work, loss_spec, batches)
    arrays = work.trainable()
    garrays = grads.arrays()
    pool = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    target = len(pool) if n_samples is None else min(n_samples, len(pool))
    base_pattern = _relu_pattern(work, batches)

    worst = 0.0
    checked = kinks = 0
    for idx in order:
        if checked >= target:
            break
        i, j = pool[idx]
        flat = arrays[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        lp, _ = loss_and_grads(work, loss_spec, batches)
        pat_p = _relu_pattern(work, batches)
        flat[j] = orig - eps
        lm, _ = loss_and_grads(work, loss_spec, batches)
        pat_m = _relu_pattern(work, batches)
        flat[j] = orig
        if any(not np.array_equal(a, b) for a, b in zip(pat_p + pat_m, base_pattern + base_pattern)):
            kinks += 1
            if kinks > max_kinks:
                raise NumericError("too many ReLU kinks inside the difference stencil", term="gradcheck")
            continue
        numeric = (lp - lm) / (2 * eps)
        analytic = garrays[i].reshape(-1)[j]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
        checked += 1
    return worst
