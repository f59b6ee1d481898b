"""Per-layer, per-multiplier error statistics.

The error ``X`` of multiplier ``j`` on layer ``k`` is the difference between the
layer's linear output computed with ``j`` and with the exact multiplier, both on
the same (accurately computed) quantized layer inputs.  Statistics are divided
by the layer's accurate output std so they share units with the noise scales
found by :mod:`qosnets.sensitivity`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .am_models import AmLibrary, AmModel, error_surface
from .qnn import (MultPlan, QuantModel, UncalibratedError, forward, linear_from_codes, quantize,
                  weight_matrix)


@dataclass
class ErrorMatrix:
    sigma_e: np.ndarray  # (l, m) std(X) / output_std
    mu_e: np.ndarray  # (l, m) mean(X) / output_std
    msq_e: np.ndarray  # (l, m) mean(X**2) / output_std**2, accumulated separately
    sample_count: int
    am_names: list[str]

    @property
    def shape(self) -> tuple[int, int]:
        return self.sigma_e.shape


class _Moments:
    """Running count/mean/M2 merged batch-wise (Chan et al.), plus a raw sum of squares."""

    def __init__(self, channels: int):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.sumsq = 0.0
        self.ch_sum = np.zeros(channels)
        self.ch_n = 0

    def add(self, x: np.ndarray):
        nb = x.size
        if nb == 0:
            return
        mb = float(x.mean())
        m2b = float(np.square(x - mb).sum())
        delta = mb - self.mean
        tot = self.n + nb
        self.mean += delta * nb / tot
        self.m2 += m2b + delta * delta * self.n * nb / tot
        self.n = tot
        self.sumsq += float(np.square(x).sum())
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        self.ch_sum += x.sum(axes)
        self.ch_n += x.size // x.shape[1]

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.n))

    @property
    def channel_mean(self) -> np.ndarray:
        return self.ch_sum / self.ch_n


def _layer_errors(model: QuantModel, x, ams_per_layer, batch_size: int):
    """Moments of the local error for each layer and each multiplier in its list."""
    if not model.calibrated:
        raise UncalibratedError("error measurement needs a calibrated model")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("calibration slice is empty")
    L = model.n_layers
    moments = [[_Moments(model.layers[k].out_features) for _ in ams_per_layer[k]] for k in range(L)]
    exact_plan = MultPlan.accurate(L)
    for s in range(0, x.shape[0], batch_size):
        fwd = forward(model, x[s:s + batch_size], exact_plan)
        for k in range(L):
            codes = fwd.layers[k].codes
            exact = None
            for j, am in enumerate(ams_per_layer[k]):
                if am.is_accurate:
                    diff = np.zeros_like(fwd.layers[k].z)
                else:
                    if exact is None:
                        exact = linear_from_codes(model, k, codes, exact_plan.am(k))
                    diff = linear_from_codes(model, k, codes, am) - exact
                moments[k][j].add(diff)
    return moments


def measure_error_matrix(model: QuantModel, library: AmLibrary, x, seed: int = 0,
                         batch_size: int = 256, max_samples: int | None = None) -> ErrorMatrix:
    """Measure the l x m error matrix on calibration inputs ``x``.

    ``seed`` only matters when ``max_samples`` subsamples ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if max_samples is not None and x.shape[0] > max_samples:
        idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], max_samples, replace=False))
        x = x[idx]
    L = model.n_layers
    moments = _layer_errors(model, x, [list(library)] * L, batch_size)
    std = model.output_std[:, None]
    sigma = np.array([[mo.std for mo in row] for row in moments]) / std
    mu = np.array([[mo.mean for mo in row] for row in moments]) / std
    msq = np.array([[mo.sumsq / mo.n for mo in row] for row in moments]) / std ** 2
    return ErrorMatrix(sigma, mu, msq, int(x.shape[0]), library.names)


def channel_error_means(model: QuantModel, ams: list[AmModel], x, batch_size: int = 256) -> list[np.ndarray]:
    """Per-output-channel mean local error of ``ams[k]`` on layer ``k`` (dequantized units)."""
    if len(ams) != model.n_layers:
        raise ValueError("need one multiplier per layer")
    moments = _layer_errors(model, x, [[am] for am in ams], batch_size)
    return [row[0].channel_mean for row in moments]


def activation_histogram(codes) -> np.ndarray:
    counts = np.bincount(np.asarray(codes, dtype=np.int64).ravel(), minlength=256)
    return counts / counts.sum()


def layer_weight_codes(model: QuantModel, k: int) -> np.ndarray:
    """Quantized weights of layer ``k`` as (fan_in, neurons)."""
    spec = model.layers[k]
    return quantize(weight_matrix(model.weights[k], spec), model.weight_qparams[k])


def analytic_error_estimate(weight_codes, activation_hist, am: AmModel) -> tuple[float, float]:
    """Predicted mean and std of a layer's accumulator error without simulation.

    ``weight_codes`` is (fan_in, neurons) (a 1-d array is one neuron).  Inputs
    are assumed i.i.d. with code distribution ``activation_hist``.  Per neuron
    the error is a sum of independent per-product errors, so means and variances
    add.  The layer figures describe the error of a uniformly chosen output
    element: the mean of the neuron means and the std of that mixture.
    """
    p = np.asarray(activation_hist, dtype=np.float64)
    if p.shape != (256,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("activation histogram must be 256 non-negative bins summing to 1")
    w = np.asarray(weight_codes, dtype=np.int64)
    if w.ndim == 1:
        w = w[:, None]
    err = error_surface(am).reshape(256, 256).astype(np.float64)
    mu_w = p @ err
    var_w = np.maximum(p @ np.square(err) - mu_w ** 2, 0.0)
    neuron_mean = mu_w[w].sum(0)
    neuron_var = var_w[w].sum(0)
    mean = float(neuron_mean.mean())
    std = float(np.sqrt(neuron_var.mean() + neuron_mean.var()))
    return mean, std
