import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasolab.errors import ConfigError, ContractError, ShapeError
from dasolab.nn_core import (
    Batches,
    Grads,
    LossSpec,
    OptState,
    ema_update,
    finite_diff_check,
    forward,
    init_model,
    loss_and_grads,
    sgd_step,
    softmax,
    softmax_ce,
)

from oracles import ce_scalar


def test_init_is_deterministic():
    a = init_model([2, 8], 2, seed=0)
    b = init_model([2, 8], 2, seed=0)
    for x, y in zip(a.trainable() + a.ema_arrays(), b.trainable() + b.ema_arrays()):
        assert np.array_equal(x, y)


def test_init_shapes_and_ema_copy():
    p = init_model([2, 8], 2, seed=3)
    assert p.classifier[0].shape == (8, 2)
    assert p.classifier[1].shape == (2,)
    for (w, b), (ew, eb) in zip(p.encoder_layers, p.ema_encoder_layers):
        assert np.array_equal(w, ew) and np.array_equal(b, eb)
        assert w is not ew
    assert all(np.all(b == 0) for _, b in p.encoder_layers)
    w = p.encoder_layers[0][0]
    assert np.all(np.abs(w) <= 1 / math.sqrt(2))


@pytest.mark.parametrize("dims,K", [([], 3), ([4], 3), ([4, 0], 3), ([4, 8], 1)])
def test_init_rejects_bad_config(dims, K):
    with pytest.raises(ConfigError):
        init_model(dims, K, 0)


def test_forward_zero_weights_gives_zero():
    p = init_model([3, 5, 4], 3, seed=0)
    for arr in p.trainable():
        arr[...] = 0
    z, logits = forward(p, np.array([1.0, -2.0, 3.0]))
    assert np.all(z == 0) and np.all(logits == 0)


def test_forward_identity_layer():
    p = init_model([3, 3], 2, seed=0)
    p.encoder_layers[0][0][...] = np.eye(3)
    x = np.array([0.5, 2.0, 0.0])
    z, _ = forward(p, x)
    assert np.array_equal(z, x)


def test_forward_shape_error():
    p = init_model([3, 4], 2, seed=0)
    with pytest.raises(ShapeError):
        forward(p, np.zeros(5))


def test_forward_ema_path_uses_shadow_weights():
    p = init_model([3, 4], 2, seed=0)
    p.ema_encoder_layers[0][0][...] = 0.0
    z, _ = forward(p, np.ones(3), use_ema_encoder=True)
    assert np.all(z == 0)
    z_live, _ = forward(p, np.ones(3))
    assert np.any(z_live != 0)


def test_softmax_ce_uniform():
    loss, _ = softmax_ce(np.eye(4)[2], np.zeros(4))
    assert loss == pytest.approx(math.log(4), abs=1e-15)


def test_softmax_ce_fixed_point():
    t = np.array([0.1, 0.6, 0.3])
    loss, g = softmax_ce(t, np.log(t))
    assert loss == pytest.approx(-np.sum(t * np.log(t)), abs=1e-14)
    assert np.allclose(g, 0, atol=1e-15)


def test_softmax_ce_scalar_value():
    loss, _ = softmax_ce([1.0, 0.0], [3.0, 1.0])
    # log(1 + e^-2), evaluated with mpmath
    assert loss == pytest.approx(0.126928011042972496, abs=1e-15)
    assert loss == pytest.approx(ce_scalar([1, 0], [3, 1]), abs=1e-15)


def test_softmax_ce_rejects_unnormalized():
    with pytest.raises(ContractError):
        softmax_ce([0.5, 0.4], [0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.data())
def test_softmax_ce_nonnegative(logits, data):
    k = data.draw(st.integers(0, len(logits) - 1))
    loss, g = softmax_ce(np.eye(len(logits))[k], logits)
    assert loss >= 0
    assert abs(g.sum()) < 1e-12


def test_softmax_ce_large_margin_limit():
    loss, _ = softmax_ce([0, 1, 0], [0.0, 40.0, 0.0])
    assert loss < 1e-6


def _tiny_problem(seed=0, unsup="ce"):
    rng = np.random.default_rng(seed)
    p = init_model([3, 6, 5], 4, seed)
    for _, b in p.encoder_layers:
        b += 0.1
    batches = Batches(
        x=rng.normal(size=(5, 3)),
        y=np.eye(4)[rng.integers(4, size=5)],
        u=rng.normal(size=(7, 3)),
        u_target=softmax(rng.normal(size=(7, 4))),
        u_mask=np.array([1, 0, 1, 1, 0, 1, 1.0]),
        align_target=softmax(rng.normal(size=(7, 4))),
        prototypes=np.abs(rng.normal(size=(4, 5))) + 0.1,
    )
    spec = LossSpec(lambda_u=0.7, lambda_align=1.3, unsup=unsup, T_proto=0.5,
                    la_offset=np.log([40.0, 20.0, 5.0, 1.0]))
    return p, spec, batches


def test_zero_weight_spec_gives_zero():
    p, _, b = _tiny_problem()
    b.x = None
    loss, g = loss_and_grads(p, LossSpec(lambda_u=0, lambda_align=0), b)
    assert loss == 0
    assert all(np.all(a == 0) for a in g.arrays())


def test_mean_reduction_under_row_duplication():
    p, spec, b = _tiny_problem()
    loss, _ = loss_and_grads(p, spec, b)
    dup = Batches(**{k: (np.concatenate([v, v]) if isinstance(v, np.ndarray) and k != "prototypes" else v)
                     for k, v in vars(b).items()})
    loss2, _ = loss_and_grads(p, spec, dup)
    assert loss2 == pytest.approx(loss, rel=1e-12)


@pytest.mark.parametrize("unsup", ["ce", "mse"])
def test_composite_gradients_match_finite_differences(unsup):
    p, spec, b = _tiny_problem(seed=2, unsup=unsup)
    assert finite_diff_check(p, spec, b, eps=1e-5) < 1e-4


def test_pure_cls_gradient_check():
    p, _, b = _tiny_problem(seed=5)
    b.u = None
    assert finite_diff_check(p, LossSpec(lambda_u=0, lambda_align=0), b, eps=1e-5) < 1e-4


def test_constant_parameter_has_zero_error():
    # with only the labeled term, a dead hidden unit's outgoing weights have
    # zero analytic and zero numeric gradient
    p, _, b = _tiny_problem(seed=1)
    b.u = None
    w0, b0 = p.encoder_layers[0]
    w0[:, 0] = 0.0
    b0[0] = -5.0
    _, g = loss_and_grads(p, LossSpec(lambda_u=0, lambda_align=0), b)
    assert np.all(g.encoder_layers[1][0][0] == 0)
    assert finite_diff_check(p, LossSpec(lambda_u=0, lambda_align=0), b) < 1e-4


def test_ema_parameters_receive_no_gradient():
    p, spec, b = _tiny_problem()
    _, g = loss_and_grads(p, spec, b)
    shifted = p.copy()
    for a in shifted.ema_arrays():
        a += 1.0
    loss_a, g_a = loss_and_grads(p, spec, b)
    loss_b, g_b = loss_and_grads(shifted, spec, b)
    assert loss_a == loss_b
    assert all(np.array_equal(x, y) for x, y in zip(g_a.arrays(), g_b.arrays()))


def test_sgd_plain():
    p = init_model([2, 3], 2, 0)
    before = [a.copy() for a in p.trainable()]
    g = Grads.zeros_like(p)
    for a in g.arrays():
        a[...] = 0.5
    sgd_step(p, g, OptState(lr=0.1, momentum=0.0, weight_decay=0.0, nesterov=False))
    for a, b0 in zip(p.trainable(), before):
        assert np.allclose(a, b0 - 0.05, atol=1e-15)


def test_sgd_zero_grad_is_noop():
    p = init_model([2, 3], 2, 0)
    before = [a.copy() for a in p.trainable()]
    sgd_step(p, Grads.zeros_like(p), OptState(lr=0.1, momentum=0.9, weight_decay=0.0, nesterov=True))
    assert all(np.array_equal(a, b0) for a, b0 in zip(p.trainable(), before))


def test_sgd_momentum_hand_iteration():
    p = init_model([1, 1], 2, 0)
    w = p.encoder_layers[0][0]
    w[...] = 0.0
    g = Grads.zeros_like(p)
    g.encoder_layers[0][0][...] = 1.0
    opt = OptState(lr=0.1, momentum=0.9, weight_decay=0.0, nesterov=False)
    sgd_step(p, g, opt)
    assert w[0, 0] == pytest.approx(-0.1, abs=1e-15)
    sgd_step(p, g, opt)
    assert w[0, 0] == pytest.approx(-0.1 - 0.19, abs=1e-15)


def test_sgd_nesterov_rule():
    p = init_model([1, 1], 2, 0)
    w = p.encoder_layers[0][0]
    w[...] = 2.0
    g = Grads.zeros_like(p)
    g.encoder_layers[0][0][...] = 1.0
    opt = OptState(lr=0.1, momentum=0.9, weight_decay=0.01, nesterov=True)
    sgd_step(p, g, opt)
    d = 1.0 + 0.01 * 2.0
    assert w[0, 0] == pytest.approx(2.0 - 0.1 * (d + 0.9 * d), abs=1e-15)


def test_ema_limits():
    e = [np.array([3.0, -1.0])]
    p = [np.array([1.0, 2.0])]
    ema_update(e, p, 0.0)
    assert np.array_equal(e[0], p[0])
    e = [np.array([3.0, -1.0])]
    ema_update(e, p, 1.0)
    assert np.array_equal(e[0], [3.0, -1.0])


def test_ema_hand_iteration():
    e, p = [np.zeros(1)], [np.ones(1)]
    seen = []
    for _ in range(3):
        ema_update(e, p, 0.9)
        seen.append(e[0][0])
    assert seen == pytest.approx([0.1, 0.19, 0.271], abs=1e-15)


@pytest.mark.parametrize("rho", [-0.1, 1.5])
def test_ema_rejects_bad_rho(rho):
    with pytest.raises(ConfigError):
        ema_update([np.zeros(1)], [np.ones(1)], rho)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 0.999), st.integers(1, 30), st.floats(-5, 5), st.floats(-5, 5))
def test_ema_contraction(rho, n, e0, p0):
    e = [np.array([e0])]
    for _ in range(n):
        ema_update(e, [np.array([p0])], rho)
    assert abs(e[0][0] - p0) <= rho**n * abs(e0 - p0) + 1e-12
