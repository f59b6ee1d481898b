"""Per-layer noise tolerance via gradient descent on injected Gaussian noise.

Each layer ``k`` receives ``sigma_k * output_std_k * N(0, 1)`` on its
pre-activation, with ``sigma_k = sigma_max * logistic(rho_k)``.  The loss is the
task cross-entropy minus ``lam * mean_k log(sigma_k / sigma_max)``, which
rewards large noise and saturates at ``sigma_max``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .qnn import (MultPlan, QuantModel, UncalibratedError, backward, forward,
                  softmax_cross_entropy)


@dataclass(frozen=True)
class SensitivityConfig:
    lam: float = 0.1
    sigma_max: float = 0.05
    sigma_initial: float = 0.001
    epochs: int = 5
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or not self.sigma_max > 0 or not self.sigma_initial > 0:
            raise ValueError(f"invalid sensitivity config {self}")
        if self.sigma_initial >= self.sigma_max:
            # logistic never reaches 1, so sigma_initial == sigma_max has no rho
            raise ValueError("sigma_initial must be smaller than sigma_max")


@dataclass
class SigmaG:
    sigma: np.ndarray
    sigma_max: float
    history: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if (self.sigma <= 0).any() or (self.sigma > self.sigma_max).any():
            raise ValueError("sigma_g entries must lie in (0, sigma_max]")

    def __len__(self):
        return len(self.sigma)


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sigma_from_rho(rho, sigma_max: float) -> np.ndarray:
    return sigma_max * logistic(rho)


def rho_from_sigma(sigma, sigma_max: float) -> np.ndarray:
    r = np.asarray(sigma, dtype=np.float64) / sigma_max
    return np.log(r) - np.log1p(-r)


def regularizer(rho, lam: float) -> tuple[float, np.ndarray]:
    """``-lam * mean log(sigma / sigma_max)`` and its gradient w.r.t. ``rho``."""
    rho = np.asarray(rho, dtype=np.float64)
    log_ratio = -np.logaddexp(0.0, -rho)  # log logistic(rho)
    value = -lam * log_ratio.mean()
    grad = -lam * (1.0 - logistic(rho)) / rho.size
    return float(value), grad


def noise_forward_hook(layer_out, sigma_rel: float, output_std: float, rng) -> np.ndarray:
    if sigma_rel < 0:
        raise ValueError("sigma_rel must be non-negative")
    layer_out = np.asarray(layer_out, dtype=np.float64)
    if sigma_rel == 0:
        return layer_out
    return layer_out + sigma_rel * output_std * rng.standard_normal(layer_out.shape)


def search_sigma(model: QuantModel, x, y, cfg: SensitivityConfig = SensitivityConfig(),
                 plan: MultPlan | None = None, log=None) -> SigmaG:
    """Optimize the per-layer noise scales with SGD; weights stay frozen."""
    if not model.calibrated:
        raise UncalibratedError("sensitivity search needs a calibrated model")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("dataset is empty")
    L = model.n_layers
    rho = np.full(L, rho_from_sigma(cfg.sigma_initial, cfg.sigma_max))
    vel = np.zeros(L)
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            sigma = sigma_from_rho(rho, cfg.sigma_max)
            fwd = forward(model, x[idx], plan, noise=sigma, seed=int(rng.integers(2 ** 63)),
                          keep=True)
            loss, dlogits = softmax_cross_entropy(fwd.logits, y[idx])
            g = backward(model, fwd, dlogits).sigma
            s_ = logistic(rho)
            reg, reg_grad = regularizer(rho, cfg.lam)
            grad = g * cfg.sigma_max * s_ * (1.0 - s_) + reg_grad
            vel = cfg.momentum * vel + grad
            rho = rho - cfg.lr * vel
            total += (loss + reg) * len(idx)
        sigma = sigma_from_rho(rho, cfg.sigma_max)
        history.append(sigma.copy())
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss={total / n:.4f} sigma={np.array2string(sigma, precision=4)}")
    return SigmaG(sigma_from_rho(rho, cfg.sigma_max), cfg.sigma_max, history)
