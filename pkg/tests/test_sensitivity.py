import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qosnets import qnn
from qosnets.qnn import UncalibratedError
from qosnets.sensitivity import (SensitivityConfig, SigmaG, noise_forward_hook, regularizer,
                                 rho_from_sigma, search_sigma, sigma_from_rho)


def blob_task(seed, n=2000, dim=20):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 1, (10, dim)) * 1.5
    y = rng.integers(0, 10, n)
    return centers[y] + rng.normal(0, 0.5, (n, dim)), y


def trained(sizes, seed):
    x, y = blob_task(seed, dim=sizes[0])
    m = qnn.train(qnn.mlp(sizes, seed=seed), x, y, qnn.TrainConfig(lr=0.05, epochs=10, seed=seed))
    return qnn.calibrate(m, x[:500]), x, y


def test_hook_zero_sigma_is_identity():
    z = np.arange(6.0)
    assert np.array_equal(noise_forward_hook(z, 0.0, 3.0, np.random.default_rng(0)), z)


def test_hook_monte_carlo_std():
    z = np.zeros(10 ** 6)
    out = noise_forward_hook(z, 0.05, 2.0, np.random.default_rng(0))
    assert (out - z).std() == pytest.approx(0.1, rel=0.01)


def test_hook_reproducible_and_validated():
    z = np.ones(100)
    a = noise_forward_hook(z, 0.1, 1.0, np.random.default_rng(5))
    assert np.array_equal(a, noise_forward_hook(z, 0.1, 1.0, np.random.default_rng(5)))
    with pytest.raises(ValueError):
        noise_forward_hook(z, -0.1, 1.0, np.random.default_rng(0))


@settings(max_examples=200)
@given(rho=st.floats(-30, 30), sigma_max=st.floats(1e-3, 10))
def test_reparameterization_range(rho, sigma_max):
    s = sigma_from_rho(rho, sigma_max)
    assert 0 < s <= sigma_max


@settings(max_examples=100)
@given(frac=st.floats(1e-6, 1 - 1e-6))
def test_rho_inverse(frac):
    assert sigma_from_rho(rho_from_sigma(frac * 0.05, 0.05), 0.05) == pytest.approx(frac * 0.05, rel=1e-9)


@settings(max_examples=50)
@given(rho=st.lists(st.floats(-8, 8), min_size=1, max_size=6), lam=st.floats(0, 2))
def test_regularizer_gradient_finite_differences(rho, lam):
    rho = np.array(rho)
    _, grad = regularizer(rho, lam)
    eps = 1e-6
    num = np.array([(regularizer(rho + eps * e, lam)[0] - regularizer(rho - eps * e, lam)[0]) / (2 * eps)
                    for e in np.eye(len(rho))])
    assert np.allclose(grad, num, rtol=1e-5, atol=1e-10)


def test_regularizer_value():
    sigma_max = 0.05
    rho = rho_from_sigma(np.array([0.001, 0.01]), sigma_max)
    value, _ = regularizer(rho, 0.1)
    expected = -0.1 * np.mean(np.log(np.array([0.001, 0.01]) / sigma_max))
    assert value == pytest.approx(expected, rel=1e-12)


def test_config_and_sigma_validation():
    with pytest.raises(ValueError):
        SensitivityConfig(sigma_initial=0.05, sigma_max=0.05)
    with pytest.raises(ValueError):
        SensitivityConfig(lam=-1)
    with pytest.raises(ValueError):
        SigmaG(np.array([0.0, 0.01]), 0.05)
    with pytest.raises(ValueError):
        SigmaG(np.array([0.06]), 0.05)


def test_search_requires_calibration():
    x, y = blob_task(0, n=50)
    with pytest.raises(UncalibratedError):
        search_sigma(qnn.mlp([20, 4, 10]), x, y)


def test_search_range_length_determinism():
    m, x, y = trained([20, 16, 10], seed=0)
    cfg = SensitivityConfig(epochs=2, seed=3)
    a = search_sigma(m, x, y, cfg)
    b = search_sigma(m, x, y, cfg)
    assert len(a) == m.n_layers
    assert ((a.sigma > 0) & (a.sigma <= cfg.sigma_max)).all()
    assert np.array_equal(a.sigma, b.sigma)
    assert len(a.history) == cfg.epochs


def test_lambda_zero_sigma_shrinks():
    m, x, y = trained([20, 64, 4, 10], seed=0)
    cfg = SensitivityConfig(lam=0.0, sigma_max=2.0, sigma_initial=0.5, epochs=4, lr=0.5)
    sg = search_sigma(m, x, y, cfg)
    assert (sg.sigma < cfg.sigma_initial).all()
    means = [h.mean() for h in sg.history]
    assert all(a >= b for a, b in zip(means, means[1:]))


def test_regularizer_alone_pushes_sigma_up():
    m, x, y = trained([20, 16, 10], seed=1)
    weak = search_sigma(m, x, y, SensitivityConfig(lam=0.0, epochs=2))
    strong = search_sigma(m, x, y, SensitivityConfig(lam=1.0, epochs=2))
    assert (strong.sigma > weak.sigma).all()


def test_bottleneck_layer_gets_less_noise():
    wins = 0
    for seed in range(3):
        m, x, y = trained([20, 64, 4, 10], seed=seed)
        cfg = SensitivityConfig(sigma_max=2.0, sigma_initial=0.1, epochs=5, lr=0.5, seed=seed)
        sg = search_sigma(m, x, y, cfg)
        wins += sg.sigma[1] < sg.sigma[0]  # 4-unit layer vs 64-unit layer
    assert wins >= 2
