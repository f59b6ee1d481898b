import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qosnets import qnn
from qosnets.am_models import accurate_am, make_truncation_am, truncation_library
from qosnets.qnn import (MultPlan, QuantParams, TrainConfig, UncalibratedError, approx_dot,
                         approx_matmul, backward, calibrate, count_params, dequantize, evaluate,
                         forward, quantize, softmax_cross_entropy, train)

from conftest import calibrated_mlp


# ---------------------------------------------------------------- quantization

def test_quantize_examples():
    p = QuantParams(0.5, 0)
    assert quantize(1.0, p) == 2
    assert quantize(-1.0, p) == 0
    for s in (0.01, 0.5, 3.0):
        assert quantize(0.0, QuantParams(s, 128)) == 128


def test_round_half_away_from_zero():
    p = QuantParams(1.0, 128)
    assert quantize([0.5, -0.5, 1.5, -1.5, 2.5], p).tolist() == [129, 127, 130, 126, 131]


def test_from_range_unit_weights():
    p = QuantParams.from_range(-1.0, 1.0)
    assert p.scale == pytest.approx(2 / 255, rel=1e-15)
    assert p.zero_point == 128
    assert dequantize(quantize(0.0, p), p) == 0.0


def test_from_range_degenerate_uses_floor():
    assert QuantParams.from_range(0.0, 0.0).scale == 1 / 255
    assert QuantParams.from_range(3.0, 3.0).zero_point == 0  # range widened to include 0


@pytest.mark.parametrize("bad", [(0.0, 0), (-1.0, 0), (1.0, 256), (1.0, -1)])
def test_qparams_validation(bad):
    with pytest.raises(ValueError):
        QuantParams(*bad)


@settings(max_examples=200)
@given(lo=st.floats(-100, 0), width=st.floats(1e-3, 200))
def test_codes_round_trip(lo, width):
    p = QuantParams.from_range(lo, lo + width)
    q = np.arange(256)
    assert np.array_equal(quantize(dequantize(q, p), p), q)


@settings(max_examples=200)
@given(lo=st.floats(-50, 0), width=st.floats(1e-2, 100), u=st.floats(0, 1))
def test_in_range_error_at_most_half_step(lo, width, u):
    p = QuantParams.from_range(lo, lo + width)
    x = p.scale * (0 - p.zero_point) + u * 255 * p.scale  # inside the representable range
    assert abs(dequantize(quantize(x, p), p) - x) <= p.scale / 2 * (1 + 1e-9)


# ---------------------------------------------------------------- integer products

def test_approx_dot_single_product():
    assert approx_dot([7], [9], 0, 0, make_truncation_am(2)) == 32


def test_approx_dot_accurate_is_exact_dot():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 200))
        qa, qw = rng.integers(0, 256, n), rng.integers(0, 256, n)
        za, zw = rng.integers(0, 256, 2)
        assert approx_dot(qa, qw, za, zw, accurate_am()) == int(((qa - za) * (qw - zw)).sum())


def brute_dot(qa, qw, za, zw, am):
    s = 0
    for a, w in zip(qa.tolist(), qw.tolist()):
        s += int(am.lut[a * 256 + w])
    return s - zw * sum(qa.tolist()) - za * sum(qw.tolist()) + len(qa) * za * zw


def test_approx_dot_trunc3_brute_force():
    rng = np.random.default_rng(1)
    am = make_truncation_am(3)
    for _ in range(20):
        qa, qw = rng.integers(0, 256, 64), rng.integers(0, 256, 64)
        za, zw = (int(v) for v in rng.integers(0, 256, 2))
        assert approx_dot(qa, qw, za, zw, am) == brute_dot(qa, qw, za, zw, am)


def test_approx_dot_length_mismatch():
    with pytest.raises(ValueError):
        approx_dot([1, 2], [1], 0, 0, accurate_am())


@settings(max_examples=30, deadline=None)
@given(qa=hnp.arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.integers(0, 255)),
       k=st.integers(1, 7), cols=st.integers(1, 4), seed=st.integers(0, 1000))
def test_approx_matmul_matches_brute_force(qa, k, cols, seed):
    rng = np.random.default_rng(seed)
    qw = rng.integers(0, 256, (qa.shape[1], cols))
    za, zw = (int(v) for v in rng.integers(0, 256, 2))
    am = make_truncation_am(k)
    out = approx_matmul(qa, qw, za, zw, am)
    for i in range(qa.shape[0]):
        for j in range(cols):
            assert out[i, j] == brute_dot(qa[i], qw[:, j], za, zw, am)


def test_lut_path_with_exact_table_equals_fast_path():
    am = make_truncation_am(0)
    am.__dict__["is_accurate"] = False  # force the table-gather path
    rng = np.random.default_rng(2)
    qa, qw = rng.integers(0, 256, (30, 40)), rng.integers(0, 256, (40, 5))
    assert np.array_equal(approx_matmul(qa, qw, 3, 200, am), approx_matmul(qa, qw, 3, 200, accurate_am()))


# ---------------------------------------------------------------- model description

@pytest.mark.parametrize("kw", [dict(kind="pool", in_features=1, out_features=1),
                                dict(kind="dense", in_features=0, out_features=1),
                                dict(kind="conv2d", in_features=1, out_features=1, kernel=2),
                                dict(kind="dense", in_features=1, out_features=1, activation="tanh")])
def test_layer_spec_validation(kw):
    with pytest.raises(ValueError):
        qnn.LayerSpec(**kw)


def test_model_shape_validation():
    m = qnn.mlp([4, 3, 2])
    with pytest.raises(ValueError):
        qnn.QuantModel(m.layers, (5,), m.weights, m.biases, m.gammas, m.betas, m.running_mean,
                       m.running_var)
    with pytest.raises(ValueError):
        qnn.QuantModel(m.layers, (4,), [m.weights[1], m.weights[0]], m.biases, m.gammas, m.betas,
                       m.running_mean, m.running_var)


def test_mult_plan_validation(library):
    with pytest.raises(ValueError):
        MultPlan((0, 9), library)
    plan = MultPlan.from_names(["trunc2", "accurate"], library)
    assert plan.indices == (2, 0) and plan.names == ("trunc2", "accurate")


def test_toy_cnn_shapes():
    m = qnn.toy_cnn()
    assert m.layer_input_shapes() == [(1, 16, 16), (8, 8, 8), (16, 4, 4)]
    assert qnn.toy_cnn(input_hw=28).layers[2].in_features == 16 * 7 * 7


# ---------------------------------------------------------------- forward

def conv_reference(x, w, pad):
    n, c, h, ww = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, h + 2 * pad - k + 1, ww + 2 * pad - k + 1))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            out[:, :, i, j] = np.einsum("nckl,ockl->no", xp[:, :, i:i + k, j:j + k], w)
    return out


def test_float_conv_matches_direct_convolution():
    spec = qnn.conv3x3(2, 3, activation="none")
    m = qnn.init_model([spec], (2, 6, 5), seed=3)
    x = np.random.default_rng(0).normal(size=(4, 2, 6, 5))
    out = forward(m, x, quantized=False).logits
    assert np.allclose(out, conv_reference(x, m.weights[0], 1), atol=1e-12)


def test_forward_requires_calibration():
    m = qnn.mlp([4, 3])
    with pytest.raises(UncalibratedError):
        forward(m, np.zeros((1, 4)))


def quant_error_bound(model, x):
    """Per-sample bound on |quantized - float| logits for a dense ReLU network without BN."""
    h = x.copy()
    e = np.zeros(x.shape[0])
    for k, spec in enumerate(model.layers):
        ap, wp = model.act_qparams[k], model.weight_qparams[k]
        w = model.weights[k]
        e_in = e + ap.scale / 2
        abs_h = np.abs(h).sum(1)
        e = (e_in * np.abs(w).sum(0).max() + (abs_h + e_in * spec.in_features) * wp.scale / 2)
        h = h @ w + model.biases[k]
        if spec.activation == "relu":
            h = np.maximum(h, 0)
    return e


def test_accurate_forward_within_quantization_bound():
    model, x = calibrated_mlp([6, 12, 4], seed=5, n=512)
    q = forward(model, x).logits
    f = forward(model, x, quantized=False).logits
    gap = np.abs(q - f).max(1)
    bound = quant_error_bound(model, x)
    assert (gap <= bound).all()
    assert gap.max() > 0  # quantization is actually exercised


def test_forward_deterministic_and_zero_noise_identity(toy_model, digits):
    x = digits[1].x[:32]
    plan = MultPlan.from_names(["trunc2", "trunc3", "trunc1"], truncation_library())
    a = forward(toy_model, x, plan).logits
    assert np.array_equal(a, forward(toy_model, x, plan).logits)
    assert np.array_equal(a, forward(toy_model, x, plan, noise=np.zeros(3), seed=9).logits)
    n1 = forward(toy_model, x, plan, noise=np.full(3, 0.05), seed=4).logits
    assert np.array_equal(n1, forward(toy_model, x, plan, noise=np.full(3, 0.05), seed=4).logits)
    assert not np.array_equal(n1, forward(toy_model, x, plan, noise=np.full(3, 0.05), seed=5).logits)


def test_noise_first_pass_scale(toy_model, digits):
    """With sigma=0.001 each layer is perturbed by 0.001*output_std noise."""
    x = digits[1].x[:64]
    clean = forward(toy_model, x, keep=True)
    noisy = forward(toy_model, x, noise=np.full(3, 1e-3), seed=1, keep=True)
    d = noisy.layers[0].z - clean.layers[0].z
    assert d.std() == pytest.approx(1e-3 * toy_model.output_std[0], rel=0.02)


def test_batch_bn_updates_running_stats():
    m = qnn.mlp([3, 5, 2], has_bn=True)
    x = np.random.default_rng(0).normal(2.0, 1.0, size=(64, 3))
    before = m.running_mean[0].copy()
    forward(m, x, quantized=False, bn_mode="batch")
    assert not np.array_equal(before, m.running_mean[0])


# ---------------------------------------------------------------- gradients

def numeric_grad(f, arr, eps=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def two_layer(kind, has_bn):
    rng = np.random.default_rng(0)
    if kind == "dense":
        m = qnn.mlp([5, 7, 3], has_bn=has_bn, seed=1)
        x = rng.normal(size=(8, 5))
    else:
        layers = [qnn.conv3x3(2, 3, has_bn=has_bn, pool=2), qnn.dense(3 * 2 * 2, 3, activation="none")]
        m = qnn.init_model(layers, (2, 4, 4), seed=1)
        x = rng.normal(size=(6, 2, 4, 4))
    if has_bn:
        for k in range(m.n_layers):
            if m.gammas[k] is not None:
                m.gammas[k] = rng.uniform(0.5, 1.5, m.gammas[k].shape)
                m.betas[k] = rng.normal(0, 0.3, m.betas[k].shape)
                m.running_mean[k] = rng.normal(0, 0.3, m.running_mean[k].shape)
                m.running_var[k] = rng.uniform(0.5, 2.0, m.running_var[k].shape)
    for b in m.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    y = rng.integers(0, 3, x.shape[0])
    return m, x, y


@pytest.mark.parametrize("kind", ["dense", "conv"])
@pytest.mark.parametrize("bn_mode", ["frozen", "batch"])
def test_gradients_match_finite_differences(kind, bn_mode):
    m, x, y = two_layer(kind, has_bn=True)
    stats = (list(m.running_mean), list(m.running_var))

    def loss():
        m.running_mean[:], m.running_var[:] = list(stats[0]), list(stats[1])
        return softmax_cross_entropy(forward(m, x, quantized=False, bn_mode=bn_mode).logits, y)[0]

    fwd = forward(m, x, quantized=False, bn_mode=bn_mode, keep=True)
    m.running_mean[:], m.running_var[:] = list(stats[0]), list(stats[1])
    g = backward(m, fwd, softmax_cross_entropy(fwd.logits, y)[1], bn_mode=bn_mode)
    for grp in ("weights", "biases", "gammas", "betas"):
        for k in range(m.n_layers):
            p = getattr(m, grp)[k]
            if p is None:
                continue
            assert rel_err(getattr(g, grp)[k], numeric_grad(loss, p)) < 1e-4, (grp, k)


def test_input_gradient():
    m, x, y = two_layer("conv", has_bn=False)
    fwd = forward(m, x, quantized=False, keep=True)
    g = backward(m, fwd, softmax_cross_entropy(fwd.logits, y)[1], need_input_grad=True)
    num = numeric_grad(lambda: softmax_cross_entropy(forward(m, x, quantized=False).logits, y)[0], x)
    assert rel_err(g.x, num) < 1e-4


def test_sigma_gradient_matches_finite_differences():
    m, x, y = two_layer("dense", has_bn=True)
    m = calibrate(m, x)
    sigma = np.array([0.3, 0.2])

    def loss():
        return softmax_cross_entropy(forward(m, x, noise=sigma, seed=3, quantized=False).logits, y)[0]

    fwd = forward(m, x, noise=sigma, seed=3, quantized=False, keep=True)
    g = backward(m, fwd, softmax_cross_entropy(fwd.logits, y)[1])
    assert rel_err(g.sigma, numeric_grad(loss, sigma)) < 1e-4


# ---------------------------------------------------------------- training

def test_train_none_unchanged():
    m, x = calibrated_mlp([4, 6, 3], has_bn=True)
    y = np.zeros(len(x), dtype=int)
    out = train(m, x, y, TrainConfig(epochs=2), trainable="none")
    for a, b in zip(m.weights + m.biases, out.weights + out.biases):
        assert np.array_equal(a, b)


def test_train_masks():
    m, x = calibrated_mlp([4, 6, 3], has_bn=True)
    y = np.random.default_rng(0).integers(0, 3, len(x))
    cfg = TrainConfig(epochs=2, bn_mode="frozen")
    bn = train(m, x, y, cfg, trainable="bn_only")
    assert all(np.array_equal(a, b) for a, b in zip(m.weights, bn.weights))
    assert not np.array_equal(m.gammas[0], bn.gammas[0])
    assert not np.array_equal(m.betas[0], bn.betas[0])
    bias = train(m, x, y, cfg, trainable="bias_only")
    assert all(np.array_equal(a, b) for a, b in zip(m.weights, bias.weights))
    assert np.array_equal(m.gammas[0], bias.gammas[0]) and np.array_equal(m.betas[0], bias.betas[0])
    assert not np.array_equal(m.biases[1], bias.biases[1])
    with pytest.raises(ValueError):
        train(m, x, y, cfg, trainable="weights_only")


def test_train_does_not_mutate_input():
    m, x = calibrated_mlp([4, 6, 3], has_bn=True)
    w0 = m.weights[0].copy()
    train(m, x, np.zeros(len(x), dtype=int), TrainConfig(epochs=1))
    assert np.array_equal(m.weights[0], w0)


@pytest.mark.parametrize("kw", [dict(epochs=-1), dict(batch_size=0), dict(lr=0.0),
                                dict(momentum=1.0), dict(bn_mode="x"), dict(lr_schedule=())])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_lr_schedule():
    cfg = TrainConfig(lr_schedule=(2e-3, 2e-4))
    assert [cfg.lr_at(e) for e in range(3)] == [2e-3, 2e-4, 2e-4]


def test_linearly_separable_mlp_reaches_full_accuracy():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (400, 2))
    y = (x @ np.array([1.0, -2.0]) + 0.3 > 0).astype(int)
    margin = np.abs(x @ np.array([1.0, -2.0]) + 0.3) > 0.05
    x, y = x[margin], y[margin]
    m = qnn.mlp([2, 8, 2], seed=0)
    acc = []
    cfg = TrainConfig(lr=0.1, epochs=1, batch_size=16)
    for epoch in range(50):
        m = train(m, x, y, TrainConfig(**{**cfg.__dict__, "seed": epoch}))
        acc.append(evaluate(m, x, y, quantized=False))
        if acc[-1] == 1.0:
            break
    assert acc[-1] == 1.0, acc[-5:]


def test_quantized_training_uses_plan():
    m, x = calibrated_mlp([4, 6, 3])
    y = np.random.default_rng(0).integers(0, 3, len(x))
    plan = MultPlan.from_names(["trunc3", "trunc3"], truncation_library())
    a = train(m, x, y, TrainConfig(epochs=1, bn_mode="frozen"), plan=plan)
    b = train(m, x, y, TrainConfig(epochs=1, bn_mode="frozen"))
    assert not np.array_equal(a.weights[0], b.weights[0])


# ---------------------------------------------------------------- evaluation

def test_evaluate_single_correct_sample():
    m, x = calibrated_mlp([4, 6, 3])
    pred = qnn.predict(m, x[:1])
    assert evaluate(m, x[:1], pred) == 1.0


def test_evaluate_empty():
    m, _ = calibrated_mlp([4, 6, 3])
    with pytest.raises(ValueError):
        evaluate(m, np.zeros((0, 4)), np.zeros(0))


def test_ties_go_to_lowest_class():
    m, x = calibrated_mlp([4, 6, 3])
    m.weights[1][:] = 0
    m.biases[1][:] = 0
    assert (qnn.predict(m, x, quantized=False) == 0).all()


def test_untrained_model_on_random_labels_near_chance(digits):
    tr, va, te = digits
    m = calibrate(qnn.toy_cnn(seed=3), va.x)
    y = np.random.default_rng(0).integers(0, 10, 2000)
    x = np.concatenate([tr.x[:2000]])
    assert abs(evaluate(m, x, y) - 0.1) <= 0.05


def test_accurate_plan_equals_default(toy_model, digits):
    te = digits[2]
    lib = truncation_library()
    assert evaluate(toy_model, te.x, te.y, MultPlan.accurate(3, lib)) == evaluate(toy_model, te.x, te.y)


def test_calibrate_idempotent_and_empty():
    m, x = calibrated_mlp([4, 6, 3], has_bn=True)
    again = calibrate(m, x)
    assert again.act_qparams == m.act_qparams and again.weight_qparams == m.weight_qparams
    assert np.array_equal(again.output_std, m.output_std)
    with pytest.raises(ValueError):
        calibrate(m, np.zeros((0, 4)))


def test_calibrate_zero_input_uses_scale_floor():
    m = calibrate(qnn.mlp([4, 3]), np.zeros((10, 4)))
    assert m.act_qparams[0].scale == 1 / 255
    assert (m.output_std > 0).all()


def test_calibrate_weights_in_unit_range():
    m = qnn.mlp([3, 2])
    m.weights[0][:] = np.array([[-1.0, 0.2], [0.5, 1.0], [0.0, -0.3]])
    m = calibrate(m, np.ones((4, 3)))
    assert m.weight_qparams[0] == QuantParams(2 / 255, 128)


# ---------------------------------------------------------------- parameter counts

def test_count_params_toy():
    m = qnn.toy_cnn()
    weights = 8 * 9 + 16 * 8 * 9 + 256 * 10
    per_op = (8 + 16 + 10) + 2 * (8 + 16)
    assert count_params(m) == weights + per_op == 3866
    assert count_params(m, "per_op_point", 1) == count_params(m)
    assert count_params(m, "per_op_point", 3, "full") == 3 * 3866
    assert count_params(m, "per_op_point", 3, "bn") == weights + 3 * per_op
    assert count_params(m, "per_op_point", 3, "bias") == 3866 + 2 * 34
    with pytest.raises(ValueError):
        count_params(m, "per_op_point", 0)
    with pytest.raises(ValueError):
        count_params(m, "everything")
