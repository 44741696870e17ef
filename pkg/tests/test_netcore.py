import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uqbed import oracles
from uqbed.netcore import (
    Predictor,
    PredictorConfig,
    SgdState,
    ShapeError,
    StaleTraceError,
    apply_dropout,
    backward,
    forward,
    input_jacobian,
    input_jacobian_sqnorm,
    load_predictor,
    read_arrays,
    replay,
    save_predictor,
    sgd_step,
    softmax,
    spectral_normalize,
)

from gradcases import check_case


def small_net(seed=0, **kw):
    cfg = PredictorConfig(input_dim=3, num_classes=4, hidden_widths=(5,), feature_dim=4, **kw)
    return Predictor.init(cfg, seed, dropout_seed=seed + 1)


# -- config -------------------------------------------------------------------

def test_tier_shapes():
    cfg = PredictorConfig.for_tier("small", 16, 4)
    assert cfg.layer_shapes() == [(16, 64), (64, 64), (64, 32), (32, 4)]
    large = PredictorConfig.for_tier("large", 16, 4, head_kind="mimo", mimo_heads=3)
    assert large.layer_shapes() == [(48, 256), (256, 256), (256, 256), (256, 128), (128, 12)]


@pytest.mark.parametrize("kw", [
    {"num_classes": 1}, {"feature_dim": 0}, {"hidden_widths": (3, 0)}, {"head_kind": "conv"},
    {"head_kind": "mimo", "mimo_heads": 0}, {"mimo_heads": 2}, {"dropout_rate": 1.0},
])
def test_config_rejects_invalid(kw):
    base = {"input_dim": 2, "num_classes": 3}
    base.update(kw)
    with pytest.raises(ValueError):
        PredictorConfig(**base)


def test_param_shapes_enforced():
    cfg = PredictorConfig(input_dim=2, num_classes=2, hidden_widths=(), feature_dim=2)
    with pytest.raises(ShapeError):
        Predictor(cfg, [np.eye(2), np.zeros(2), np.eye(3), np.zeros(2)])


# -- forward ------------------------------------------------------------------

def test_zero_weights_give_zero_logits():
    pred = small_net()
    pred.params = [np.zeros_like(p) for p in pred.params]
    z, _ = forward(pred, np.array([3.0, -1.0, 2.0]))
    assert np.array_equal(z, np.zeros(4))


def test_identity_layer():
    cfg = PredictorConfig(input_dim=2, num_classes=2, hidden_widths=(), feature_dim=2)
    pred = Predictor(cfg, [np.eye(2), np.zeros(2), np.eye(2), np.zeros(2)])
    z, _ = forward(pred, np.array([1.0, 2.0]))
    assert np.array_equal(z, [1.0, 2.0])


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(3)
    cfg = PredictorConfig(input_dim=4, num_classes=3, hidden_widths=(6,), feature_dim=5)
    pred = Predictor.init(cfg, 11)
    for i in range(1, len(pred.params), 2):
        pred.params[i] = rng.normal(size=pred.params[i].shape)
    for _ in range(10):
        x = rng.normal(size=4)
        z, _ = forward(pred, x)
        assert np.max(np.abs(z - oracles.matmul_forward(pred.params, x))) < 1e-12


def test_forward_with_dropout_matches_oracle_masks():
    pred = small_net(dropout_rate=0.4)
    x = np.array([0.5, -1.0, 2.0])
    z, tr = forward(pred, x, "train", rng=np.random.default_rng(5))
    masks = [m[0] for m in tr.masks]
    assert np.max(np.abs(z - oracles.matmul_forward(pred.params, x, masks))) < 1e-12


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(small_net(), np.ones(5))
    with pytest.raises(ValueError):
        forward(small_net(), np.ones(3), mode="test")


def test_eval_mode_disables_dropout_unless_stochastic():
    pred = small_net(dropout_rate=0.5)
    x = np.ones((4, 3))
    a, tr = forward(pred, x, "eval")
    assert all(m is None for m in tr.masks)
    assert np.array_equal(a, forward(pred, x, "eval")[0])
    s1, _ = forward(pred, x, "eval", rng=np.random.default_rng(0), stochastic=True)
    s2, _ = forward(pred, x, "eval", rng=np.random.default_rng(0), stochastic=True)
    assert np.array_equal(s1, s2)
    assert not np.array_equal(s1, a)


def test_forward_is_pure():
    pred = small_net(spectral_norm=True)
    x = np.random.default_rng(0).normal(size=(7, 3))
    assert np.array_equal(forward(pred, x)[0], forward(pred, x)[0])


def test_replay_bitwise():
    pred = small_net(dropout_rate=0.3)
    x = np.random.default_rng(1).normal(size=(6, 3))
    z, tr = forward(pred, x, "train")
    assert np.array_equal(replay(pred, tr), z)


def test_rbf_head_output():
    cfg = PredictorConfig(input_dim=2, num_classes=2, hidden_widths=(), feature_dim=2, head_kind="rbf")
    pred = Predictor(cfg, [np.eye(2), np.zeros(2), np.eye(2), np.zeros(2)])
    z, _ = forward(pred, np.array([1.0, 2.0]))
    assert np.allclose(z, np.exp(-np.array([1.0, 4.0])), rtol=0, atol=1e-15)


# -- softmax ------------------------------------------------------------------

@pytest.mark.parametrize("c", [-7.0, 0.0, 3.5, 1e4])
def test_softmax_uniform_on_constant(c):
    assert np.allclose(softmax(np.full(3, c)), 1 / 3, atol=1e-15)


def test_softmax_high_temperature():
    z = np.array([5.0, -3.0, 100.0, 0.0])
    assert np.max(np.abs(softmax(z, 1e9) - 0.25)) < 1e-6


def test_softmax_hand_value():
    assert np.allclose(softmax(np.array([0.0, math.log(2.0)])), [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_errors():
    with pytest.raises(ValueError):
        softmax(np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        softmax(np.zeros(3), -1.0)
    with pytest.raises(FloatingPointError):
        softmax(np.array([0.0, np.inf]))
    with pytest.raises(FloatingPointError):
        softmax(np.array([np.nan, 1.0]))


@settings(max_examples=200, deadline=None)
@given(arrays(float, st.integers(2, 8), elements=st.floats(-1e4, 1e4)),
       st.floats(1e-3, 1e3))
def test_softmax_on_simplex(z, tau):
    p = softmax(z, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(float, st.integers(2, 8), elements=st.floats(-50, 50)), st.floats(1e-2, 1e2))
def test_softmax_argmax_temperature_invariant(z, tau):
    assert np.argmax(softmax(z, tau)) == np.argmax(softmax(z, 1.0))


# -- backward -----------------------------------------------------------------

def test_zero_seed_gives_zero_grads():
    pred = small_net(dropout_rate=0.2, spectral_norm=True)
    z, tr = forward(pred, np.ones((3, 3)), "train")
    for g in backward(pred, tr, np.zeros_like(z)):
        assert not np.any(g)


def test_backward_linear_in_seed():
    pred = small_net(spectral_norm=True)
    rng = np.random.default_rng(4)
    z, tr = forward(pred, rng.normal(size=(5, 3)))
    g1, g2 = rng.normal(size=z.shape), rng.normal(size=z.shape)
    a = backward(pred, tr, g1 + g2)
    b = backward(pred, tr, g1)
    c = backward(pred, tr, g2)
    for x, y, w in zip(a, b, c):
        assert np.max(np.abs(x - (y + w))) < 1e-10


def test_backward_rejects_stale_trace():
    pred = small_net()
    z, tr = forward(pred, np.ones(3))
    pred.params[0][0, 0] += 1.0
    pred.touch()
    with pytest.raises(StaleTraceError):
        backward(pred, tr, np.ones_like(z))


def test_backward_shapes():
    pred = small_net(head_kind="mimo", mimo_heads=2)
    z, tr = forward(pred, np.ones((2, 6)))
    grads = backward(pred, tr, np.ones_like(z))
    assert [g.shape for g in grads] == [p.shape for p in pred.params]


@pytest.mark.parametrize("algorithm,spectral", [("erm", False), ("erm", True), ("mcdropout", False),
                                                 ("rbf", False), ("mimo", True)])
def test_gradients_match_finite_differences(algorithm, spectral):
    assert check_case(algorithm, spectral, 99) < 1e-4


def test_input_gradient_matches_finite_differences():
    pred = small_net(spectral_norm=True)
    x = np.array([0.3, -0.7, 1.1])
    w = np.array([1.0, -2.0, 0.5, 3.0])
    z, tr = forward(pred, x)
    _, dx = backward(pred, tr, w, input_grad=True)
    xs = x.copy()
    num = oracles.numeric_grad(lambda: float(forward(pred, xs)[0] @ w), [xs])[0]
    assert oracles.max_rel_error([dx], [num]) < 1e-6


# -- sgd ----------------------------------------------------------------------

def test_sgd_zero_lr_is_identity():
    p = [np.array([1.0, 2.0])]
    before = p[0].copy()
    sgd_step(SgdState(0.0), p, [np.array([3.0, -1.0])])
    assert np.array_equal(p[0], before)


def test_sgd_hand_step():
    p = [np.array([1.0])]
    sgd_step(SgdState(0.1, momentum=0.0, weight_decay=0.0), p, [np.array([0.5])])
    assert p[0][0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_unrolled():
    p = [np.array([0.0])]
    st_ = SgdState(1.0, momentum=0.9, weight_decay=0.0)
    sgd_step(st_, p, [np.array([1.0])])
    sgd_step(st_, p, [np.array([1.0])])
    assert p[0][0] == pytest.approx(-2.9, abs=1e-12)


def test_sgd_weight_decay_in_gradient():
    p = [np.array([2.0])]
    sgd_step(SgdState(0.5, momentum=0.0, weight_decay=0.1), p, [np.array([0.0])])
    assert p[0][0] == pytest.approx(2.0 - 0.5 * 0.2, abs=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(SgdState(0.1), [np.zeros(2)], [np.zeros(3)])


def test_lr_schedule():
    s = SgdState(0.1, schedule_period=20)
    assert s.lr_at(0) == 0.1 and s.lr_at(19) == 0.1
    assert s.lr_at(20) == pytest.approx(0.01) and s.lr_at(45) == pytest.approx(0.001)


# -- spectral normalization ---------------------------------------------------

def test_spectral_diag():
    Wn, _ = spectral_normalize(np.diag([3.0, 1.0]))
    assert np.max(np.abs(Wn - np.diag([1.0, 1 / 3]))) < 1e-6


def test_spectral_orthogonal_unchanged():
    Q, _ = np.linalg.qr(np.random.default_rng(2).normal(size=(5, 5)))
    Wn, _ = spectral_normalize(Q)
    assert np.max(np.abs(Wn - Q)) < 1e-6


def test_spectral_zero_guard():
    W = np.zeros((3, 4))
    Wn, _ = spectral_normalize(W)
    assert np.array_equal(Wn, W)


def test_spectral_bound_after_five_rounds():
    rng = np.random.default_rng(7)
    for _ in range(50):
        Wn, _ = spectral_normalize(rng.normal(size=(32, 32)), power_iters=5, rng=rng)
        assert np.linalg.norm(Wn, 2) <= 1 + 1e-3


def test_spectral_exact_round_count():
    # with tol=None exactly power_iters rounds run; one round from a fixed start is reproducible
    W = np.random.default_rng(0).normal(size=(6, 6))
    a, va = spectral_normalize(W, 1, state=np.ones(6) / np.sqrt(6), tol=None)
    u = W @ (np.ones(6) / np.sqrt(6))
    u /= np.linalg.norm(u)
    v = W.T @ u
    v /= np.linalg.norm(v)
    assert np.allclose(va, v, atol=1e-14)


def test_predictor_spectral_invariant():
    cfg = PredictorConfig.for_tier("small", 16, 4, spectral_norm=True)
    pred = Predictor.init(cfg, 5)
    for i in range(cfg.n_featurizer_layers):
        W, sn = pred.effective_weight(i)
        assert sn is not None
        assert np.linalg.norm(W, 2) <= 1 + 1e-3


def test_spectral_init_deterministic():
    cfg = PredictorConfig.for_tier("small", 8, 3, spectral_norm=True)
    a, b = Predictor.init(cfg, 9), Predictor.init(cfg, 9)
    for x, y in zip(a.spectral, b.spectral):
        assert np.array_equal(x, y)


# -- dropout ------------------------------------------------------------------

def test_dropout_rate_zero_identity():
    a = np.arange(6.0)
    out, _ = apply_dropout(a, 0.0, np.random.default_rng(0))
    assert np.array_equal(out, a)


def test_dropout_expectation():
    out, _ = apply_dropout(np.ones(10 ** 6), 0.5, np.random.default_rng(0))
    assert abs(out.mean() - 1.0) < 0.01


def test_dropout_deterministic():
    a = np.ones(100)
    x, _ = apply_dropout(a, 0.3, np.random.default_rng(4))
    y, _ = apply_dropout(a, 0.3, np.random.default_rng(4))
    assert np.array_equal(x, y)


def test_dropout_rate_one_rejected():
    with pytest.raises(ValueError):
        apply_dropout(np.ones(3), 1.0, np.random.default_rng(0))


# -- input Jacobian -----------------------------------------------------------

def test_jacobian_constant_predictor():
    pred = small_net()
    for i in range(0, len(pred.params), 2):
        pred.params[i][:] = 0.0
    pred.params[-1][:] = [1.0, 2.0, 0.0, -1.0]
    assert input_jacobian_sqnorm(pred, np.array([1.0, 2.0, 3.0])) == 0.0


@pytest.mark.parametrize("kw,tau", [({}, 1.0), ({}, 2.5), ({"head_kind": "mimo", "mimo_heads": 2}, 1.0),
                                    ({"head_kind": "rbf"}, 1.0), ({"spectral_norm": True}, 0.7)])
def test_jacobian_matches_finite_differences(kw, tau):
    pred = small_net(seed=4, **kw)
    cfg = pred.config
    x = np.array([0.4, -0.2, 0.9])
    T = cfg.n_heads

    def prob(xx):
        z, _ = forward(pred, np.tile(xx, T))
        return softmax(z.reshape(T, cfg.num_classes), tau).mean(axis=0)

    num = np.empty((cfg.num_classes, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-5
        num[:, j] = (prob(x + e) - prob(x - e)) / 2e-5
    jac = input_jacobian(pred, x, tau)[0]
    assert oracles.max_rel_error([jac], [num]) < 1e-4
    assert input_jacobian_sqnorm(pred, x, tau) == pytest.approx(float(np.sum(num ** 2)), rel=1e-4)


def test_jacobian_deterministic_across_copies():
    pred = small_net(seed=2)
    x = np.array([1.0, 0.5, -0.5])
    assert input_jacobian_sqnorm(pred, x) == input_jacobian_sqnorm(pred.copy(), x)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    pred = small_net(seed=3, spectral_norm=True, head_kind="mimo", mimo_heads=2)
    path = tmp_path / "m.ckpt"
    save_predictor(path, pred, {"note": "x"})
    back, meta = load_predictor(path)
    assert meta["note"] == "x"
    assert back.config == pred.config
    for a, b in zip(back.params + back.spectral, pred.params + pred.spectral):
        assert np.array_equal(a, b)
    with open(path, "rb") as f:
        assert f.readline() == b"UQBEDCKPT 1\n"


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        read_arrays(p)
