"""Small deterministic 8-bit quantized network engine.

Layers are "multiplying" layers (dense or 3x3 conv) each optionally followed by
inference-form BatchNorm, ReLU and max pooling.  Inference runs in integer
codes with a per-layer approximate multiplier; training runs a hand-written
backward pass that treats quantization and the approximate product as exact
real arithmetic (straight-through).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .am_models import AmLibrary, AmModel

BN_EPS = 1e-5
SCALE_FLOOR = 1.0 / 255
TRAINABLE = ("all", "bn_only", "bias_only", "none")


class UncalibratedError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# quantization


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.zero_point <= 255:
            raise ValueError(f"zero_point must be in 0..255, got {self.zero_point}")

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "QuantParams":
        """Asymmetric per-tensor parameters covering ``[lo, hi]`` and 0."""
        lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
        scale = (hi - lo) / 255 if hi > lo else SCALE_FLOOR
        zp = int(np.clip(round_half_away(-lo / scale), 0, 255))
        return cls(scale, zp)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, p: QuantParams) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) / p.scale) + p.zero_point
    return np.clip(q, 0, 255).astype(np.int64)


def dequantize(q, p: QuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - p.zero_point) * p.scale


# --------------------------------------------------------------------------
# approximate integer products


def approx_matmul(qa: np.ndarray, qw: np.ndarray, zp_a: int, zp_w: int, am: AmModel) -> np.ndarray:
    """Zero-point corrected accumulators for ``qa @ qw`` under ``am``.

    ``qa`` is (rows, K), ``qw`` is (K, cols), both uint8 codes.  Only the raw
    code products go through the multiplier LUT; the correction sums are exact.
    """
    qa = np.asarray(qa, dtype=np.int64)
    qw = np.asarray(qw, dtype=np.int64)
    if qa.ndim != 2 or qw.ndim != 2 or qa.shape[1] != qw.shape[0]:
        raise ValueError(f"shape mismatch: {qa.shape} @ {qw.shape}")
    K = qa.shape[1]
    if am.is_accurate:
        # float64 is exact here: |sum| <= 65025 * K << 2**53
        s_am = (qa.astype(np.float64) @ qw.astype(np.float64)).astype(np.int64)
    else:
        table = am.table[:, qw].transpose(1, 0, 2)  # (K, 256, cols)
        s_am = np.zeros((qa.shape[0], qw.shape[1]), dtype=np.int64)
        for k in range(K):
            s_am += table[k][qa[:, k]]
    return (s_am - zp_w * qa.sum(1, keepdims=True) - zp_a * qw.sum(0, keepdims=True)
            + K * zp_a * zp_w)


def approx_dot(qa, qw, zp_a: int, zp_w: int, am: AmModel) -> int:
    qa = np.asarray(qa).ravel()
    qw = np.asarray(qw).ravel()
    if qa.shape != qw.shape:
        raise ValueError(f"length mismatch: {qa.size} vs {qw.size}")
    return int(approx_matmul(qa[None, :], qw[:, None], zp_a, zp_w, am)[0, 0])


# --------------------------------------------------------------------------
# model description


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int
    out_features: int
    has_bn: bool = False
    activation: str = "relu"
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 1

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        dims = (self.in_features, self.out_features, self.kernel, self.stride, self.pool)
        if min(dims) < 1 or self.padding < 0:
            raise ValueError(f"invalid layer dimensions {self}")
        if self.kind == "conv2d" and self.kernel % 2 == 0:
            raise ValueError("conv kernel must be odd")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.in_features, self.out_features)
        return (self.out_features, self.in_features, self.kernel, self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        """Spatial size after the linear op (before pooling)."""
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def dense(n_in, n_out, **kw) -> LayerSpec:
    return LayerSpec("dense", n_in, n_out, **kw)


def conv3x3(c_in, c_out, **kw) -> LayerSpec:
    return LayerSpec("conv2d", c_in, c_out, kernel=3, **kw)


@dataclass
class QuantModel:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gammas: list[np.ndarray | None]
    betas: list[np.ndarray | None]
    running_mean: list[np.ndarray | None]
    running_var: list[np.ndarray | None]
    act_qparams: list[QuantParams | None] = field(default_factory=list)
    weight_qparams: list[QuantParams | None] = field(default_factory=list)
    output_std: np.ndarray | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        for k, spec in enumerate(self.layers):
            if self.weights[k].shape != spec.weight_shape:
                raise ValueError(f"layer {k}: weight shape {self.weights[k].shape} != {spec.weight_shape}")
            if self.biases[k].shape != (spec.out_features,):
                raise ValueError(f"layer {k}: bias shape mismatch")
            if spec.has_bn:
                for v in (self.gammas[k], self.betas[k], self.running_mean[k], self.running_var[k]):
                    if v is None or v.shape != (spec.out_features,):
                        raise ValueError(f"layer {k}: BN parameter shape mismatch")
        self.layer_input_shapes()  # validates geometry
        if not self.act_qparams:
            self.act_qparams = [None] * len(self.layers)
        if not self.weight_qparams:
            self.weight_qparams = [None] * len(self.layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def calibrated(self) -> bool:
        return (self.output_std is not None
                and all(p is not None for p in self.act_qparams)
                and all(p is not None for p in self.weight_qparams))

    def copy(self) -> "QuantModel":
        return copy.deepcopy(self)

    def layer_input_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample input shape of each layer (as seen before flattening)."""
        shapes = []
        shape = self.input_shape
        for k, spec in enumerate(self.layers):
            shapes.append(shape)
            if spec.kind == "conv2d":
                if len(shape) != 3 or shape[0] != spec.in_features:
                    raise ValueError(f"layer {k}: conv expects ({spec.in_features}, H, W), got {shape}")
                oh, ow = spec.output_hw(shape[1], shape[2])
                if oh < 1 or ow < 1 or oh % spec.pool or ow % spec.pool:
                    raise ValueError(f"layer {k}: output {oh}x{ow} incompatible with pool {spec.pool}")
                shape = (spec.out_features, oh // spec.pool, ow // spec.pool)
            else:
                if int(np.prod(shape)) != spec.in_features:
                    raise ValueError(f"layer {k}: dense expects {spec.in_features} inputs, got {shape}")
                if spec.pool != 1:
                    raise ValueError(f"layer {k}: pooling after dense layers is not supported")
                shape = (spec.out_features,)
        return shapes


def init_model(layers, input_shape, seed: int = 0) -> QuantModel:
    rng = np.random.default_rng(seed)
    weights, biases, g, b, rm, rv = [], [], [], [], [], []
    for spec in layers:
        fan_in = spec.in_features * (spec.kernel ** 2 if spec.kind == "conv2d" else 1)
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), spec.weight_shape))
        biases.append(np.zeros(spec.out_features))
        c = spec.out_features
        g.append(np.ones(c) if spec.has_bn else None)
        b.append(np.zeros(c) if spec.has_bn else None)
        rm.append(np.zeros(c) if spec.has_bn else None)
        rv.append(np.ones(c) if spec.has_bn else None)
    return QuantModel(list(layers), tuple(input_shape), weights, biases, g, b, rm, rv)


def toy_cnn(input_hw: int = 16, n_classes: int = 10, seed: int = 0, width=(8, 16)) -> QuantModel:
    """conv3x3(1->8)-BN-ReLU-pool2, conv3x3(8->16)-BN-ReLU-pool2, dense(->n_classes)."""
    c1, c2 = width
    layers = [
        conv3x3(1, c1, has_bn=True, pool=2),
        conv3x3(c1, c2, has_bn=True, pool=2),
        dense(c2 * (input_hw // 4) ** 2, n_classes, activation="none"),
    ]
    return init_model(layers, (1, input_hw, input_hw), seed)


def mlp(sizes, has_bn: bool = False, seed: int = 0) -> QuantModel:
    layers = [
        dense(a, b, has_bn=has_bn and i < len(sizes) - 2,
              activation="relu" if i < len(sizes) - 2 else "none")
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
    ]
    return init_model(layers, (sizes[0],), seed)


@dataclass(frozen=True)
class MultPlan:
    """Per-layer multiplier indices into ``library``."""

    indices: tuple[int, ...]
    library: AmLibrary

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        bad = [i for i in self.indices if not 0 <= i < len(self.library)]
        if bad:
            raise ValueError(f"multiplier indices {bad} out of range for library of {len(self.library)}")

    @classmethod
    def accurate(cls, n_layers: int, library: AmLibrary | None = None) -> "MultPlan":
        return cls((0,) * n_layers, _accurate_only() if library is None else library)

    @classmethod
    def from_names(cls, names, library: AmLibrary) -> "MultPlan":
        return cls(tuple(library.index(n) for n in names), library)

    def am(self, k: int) -> AmModel:
        return self.library[self.indices[k]]

    @cached_property
    def names(self) -> tuple[str, ...]:
        return tuple(self.library[i].name for i in self.indices)


@lru_cache(maxsize=1)
def _accurate_only() -> AmLibrary:
    return AmLibrary.from_models([])


# --------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, spec: LayerSpec, pad_value=0.0):
    """(N, C, H, W) -> ((N*OH*OW, C*k*k), (OH, OW))."""
    p, k, s = spec.padding, spec.kernel, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=pad_value)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return cols, (oh, ow)


def _col2im(dcols: np.ndarray, x_shape, spec: LayerSpec, ohw) -> np.ndarray:
    n, c, h, w = x_shape
    p, k, s = spec.padding, spec.kernel, spec.stride
    oh, ow = ohw
    d = dcols.reshape(n, oh, ow, c, k, k)
    dx = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx[:, :, p:p + h, p:p + w]


def weight_matrix(w: np.ndarray, spec: LayerSpec) -> np.ndarray:
    return w if spec.kind == "dense" else w.reshape(spec.out_features, -1).T


def _to_layer_layout(y: np.ndarray, n: int, spec: LayerSpec, ohw) -> np.ndarray:
    if spec.kind == "dense":
        return y
    return y.reshape(n, ohw[0], ohw[1], spec.out_features).transpose(0, 3, 1, 2)


def _channel_axes(ndim: int) -> tuple[int, ...]:
    return (0,) if ndim == 2 else (0, 2, 3)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v if ndim == 2 else v[None, :, None, None]


def linear_from_codes(model: QuantModel, k: int, codes: np.ndarray, am: AmModel,
                      weights: np.ndarray | None = None) -> np.ndarray:
    """Dequantized linear output (no bias) of layer ``k`` for quantized inputs ``codes``."""
    spec = model.layers[k]
    ap, wp = model.act_qparams[k], model.weight_qparams[k]
    w = model.weights[k] if weights is None else weights
    qw = quantize(weight_matrix(w, spec), wp)
    n = codes.shape[0]
    if spec.kind == "dense":
        cols, ohw = codes.reshape(n, -1), None
    else:
        cols, ohw = _im2col(codes, spec, pad_value=ap.zero_point)
    acc = approx_matmul(cols, qw, ap.zero_point, wp.zero_point, am)
    return _to_layer_layout(acc * (ap.scale * wp.scale), n, spec, ohw)


@dataclass
class LayerCache:
    x_shape: tuple
    cols: np.ndarray | None = None
    ohw: tuple | None = None
    codes: np.ndarray | None = None
    z: np.ndarray | None = None
    eps: np.ndarray | None = None
    zhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None
    act_in: np.ndarray | None = None
    pool_idx: np.ndarray | None = None
    pre_pool_shape: tuple | None = None


@dataclass
class ForwardResult:
    logits: np.ndarray
    layers: list[LayerCache]


def forward(model: QuantModel, x, plan: MultPlan | None = None, noise=None, seed=None, *,
            quantized: bool = True, bn_mode: str = "frozen", bn_momentum: float = 0.1,
            keep: bool = False) -> ForwardResult:
    """Run ``model`` on a batch.

    ``noise`` is an optional per-layer relative std; layer ``k`` gets
    ``noise[k] * output_std[k] * N(0, 1)`` added to its pre-activation, drawn
    from ``np.random.default_rng(seed)``.  With ``quantized=False`` the network
    runs in float arithmetic and ``plan`` is ignored.  ``bn_mode="batch"`` uses
    batch statistics and updates running statistics in place.  ``keep`` retains
    the tensors needed by :func:`backward`.
    """
    if quantized and not model.calibrated:
        raise UncalibratedError("quantized forward requires a calibrated model")
    if plan is None:
        plan = MultPlan.accurate(model.n_layers)
    if len(plan.indices) != model.n_layers:
        raise ValueError(f"plan covers {len(plan.indices)} layers, model has {model.n_layers}")
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (model.n_layers,) or (noise < 0).any():
            raise ValueError("noise must be a non-negative per-layer vector")
        if model.output_std is None:
            raise UncalibratedError("noise injection requires output_std from calibration")
    if bn_mode not in ("frozen", "batch"):
        raise ValueError(f"unknown bn_mode {bn_mode!r}")
    rng = np.random.default_rng(seed)

    h = np.asarray(x, dtype=np.float64)
    if h.shape[1:] != model.input_shape:
        raise ValueError(f"input shape {h.shape[1:]} != model input {model.input_shape}")
    caches = []
    for k, spec in enumerate(model.layers):
        n = h.shape[0]
        if spec.kind == "dense":
            h = h.reshape(n, -1)
        c = LayerCache(x_shape=h.shape)
        if quantized:
            c.codes = quantize(h, model.act_qparams[k])
            z = linear_from_codes(model, k, c.codes, plan.am(k))
            if keep:
                c.cols, c.ohw = (h, None) if spec.kind == "dense" else _im2col(h, spec)
        else:
            cols, ohw = (h, None) if spec.kind == "dense" else _im2col(h, spec)
            z = _to_layer_layout(cols @ weight_matrix(model.weights[k], spec), n, spec, ohw)
            if keep:
                c.cols, c.ohw = cols, ohw
        z = z + _bcast(model.biases[k], z.ndim)
        if noise is not None and noise[k] > 0:
            eps = rng.standard_normal(z.shape)
            z = z + noise[k] * model.output_std[k] * eps
            c.eps = eps
        c.z = z
        if spec.has_bn:
            axes = _channel_axes(z.ndim)
            if bn_mode == "batch":
                mu, var = z.mean(axes), z.var(axes)
                cnt = z.size // z.shape[1]
                model.running_mean[k] = (1 - bn_momentum) * model.running_mean[k] + bn_momentum * mu
                model.running_var[k] = ((1 - bn_momentum) * model.running_var[k]
                                        + bn_momentum * var * cnt / max(cnt - 1, 1))
            else:
                mu, var = model.running_mean[k], model.running_var[k]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - _bcast(mu, z.ndim)) * _bcast(inv_std, z.ndim)
            y = zhat * _bcast(model.gammas[k], z.ndim) + _bcast(model.betas[k], z.ndim)
            c.zhat, c.inv_std = zhat, inv_std
        else:
            y = z
        if spec.activation == "relu":
            c.act_in = y
            y = np.maximum(y, 0.0)
        if spec.pool > 1:
            c.pre_pool_shape = y.shape
            y, c.pool_idx = _maxpool(y, spec.pool)
        if not keep:
            c.cols = c.zhat = c.act_in = c.pool_idx = None
            if not quantized:
                c.z = None
        caches.append(c)
        h = y
    return ForwardResult(h, caches)


def _maxpool(y: np.ndarray, p: int):
    n, ch, hh, ww = y.shape
    win = y.reshape(n, ch, hh // p, p, ww // p, p).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, ch, hh // p, ww // p, p * p)
    idx = win.argmax(-1)
    return np.take_along_axis(win, idx[..., None], -1)[..., 0], idx


def _maxpool_backward(dy: np.ndarray, idx: np.ndarray, shape, p: int) -> np.ndarray:
    n, ch, hh, ww = shape
    dwin = np.zeros((n, ch, hh // p, ww // p, p * p))
    np.put_along_axis(dwin, idx[..., None], dy[..., None], -1)
    dwin = dwin.reshape(n, ch, hh // p, ww // p, p, p).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(shape)


@dataclass
class Gradients:
    weights: list
    biases: list
    gammas: list
    betas: list
    sigma: np.ndarray
    x: np.ndarray | None = None


def backward(model: QuantModel, fwd: ForwardResult, dlogits: np.ndarray, bn_mode: str = "frozen",
             need_input_grad: bool = False) -> Gradients:
    """Gradients of a scalar loss given ``dL/dlogits`` (straight-through)."""
    L = model.n_layers
    g = Gradients([None] * L, [None] * L, [None] * L, [None] * L, np.zeros(L))
    d = dlogits
    for k in range(L - 1, -1, -1):
        spec, c = model.layers[k], fwd.layers[k]
        if c.cols is None:
            raise ValueError("forward must be run with keep=True before backward")
        if spec.pool > 1:
            d = _maxpool_backward(d, c.pool_idx, c.pre_pool_shape, spec.pool)
        if spec.activation == "relu":
            d = d * (c.act_in > 0)
        if spec.has_bn:
            axes = _channel_axes(d.ndim)
            g.gammas[k] = (d * c.zhat).sum(axes)
            g.betas[k] = d.sum(axes)
            dzhat = d * _bcast(model.gammas[k], d.ndim)
            if bn_mode == "batch":
                m = d.size // d.shape[1]
                d = (_bcast(c.inv_std / m, d.ndim)
                     * (m * dzhat - _bcast(dzhat.sum(axes), d.ndim)
                        - c.zhat * _bcast((dzhat * c.zhat).sum(axes), d.ndim)))
            else:
                d = dzhat * _bcast(c.inv_std, d.ndim)
        if c.eps is not None:
            g.sigma[k] = float((d * c.eps).sum() * model.output_std[k])
        axes = _channel_axes(d.ndim)
        g.biases[k] = d.sum(axes)
        dmat = d if spec.kind == "dense" else d.transpose(0, 2, 3, 1).reshape(-1, spec.out_features)
        dw = c.cols.T @ dmat
        g.weights[k] = dw if spec.kind == "dense" else dw.T.reshape(spec.weight_shape)
        if k > 0 or need_input_grad:
            dcols = dmat @ weight_matrix(model.weights[k], spec).T
            d = dcols if spec.kind == "dense" else _col2im(dcols, c.x_shape, spec, c.ohw)
            if k > 0:
                d = d.reshape((d.shape[0], *model.layer_input_shapes()[k]))
    if need_input_grad:
        g.x = d
    return g


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


# --------------------------------------------------------------------------
# calibration, training, evaluation


def calibrate(model: QuantModel, x, batch_size: int = 256) -> QuantModel:
    """Set per-tensor quantization parameters and accurate output stds from ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("calibration set is empty")
    out = model.copy()
    L = out.n_layers
    lo, hi = np.full(L, np.inf), np.full(L, -np.inf)
    for s in range(0, x.shape[0], batch_size):
        h = x[s:s + batch_size]
        for k in range(L):
            lo[k] = min(lo[k], h.min())
            hi[k] = max(hi[k], h.max())
            h = _float_layer(out, k, h)
    out.act_qparams = [QuantParams.from_range(lo[k], hi[k]) for k in range(L)]
    out.weight_qparams = [QuantParams.from_range(w.min(), w.max()) for w in out.weights]
    out.output_std = np.ones(L)

    s1, s2, cnt = np.zeros(L), np.zeros(L), np.zeros(L)
    for s in range(0, x.shape[0], batch_size):
        res = forward(out, x[s:s + batch_size], quantized=True)
        for k, c in enumerate(res.layers):
            s1[k] += c.z.sum()
            s2[k] += np.square(c.z).sum()
            cnt[k] += c.z.size
    mean = s1 / cnt
    std = np.sqrt(np.maximum(s2 / cnt - mean ** 2, 0.0))
    out.output_std = np.maximum(std, 1e-12)
    return out


def _float_layer(model: QuantModel, k: int, h: np.ndarray) -> np.ndarray:
    sub = replace(model, layers=[model.layers[k]], input_shape=h.shape[1:],
                  weights=[model.weights[k]], biases=[model.biases[k]],
                  gammas=[model.gammas[k]], betas=[model.betas[k]],
                  running_mean=[model.running_mean[k]], running_var=[model.running_var[k]],
                  act_qparams=[None], weight_qparams=[None], output_std=None)
    return forward(sub, h, quantized=False).logits


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    lr_schedule: tuple[float, ...] | None = None
    bn_mode: str = "batch"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError(f"invalid training config {self}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.bn_mode not in ("batch", "frozen"):
            raise ValueError(f"unknown bn_mode {self.bn_mode!r}")
        if self.lr_schedule is not None:
            if not self.lr_schedule or min(self.lr_schedule) <= 0:
                raise ValueError("lr_schedule must be non-empty and positive")
            object.__setattr__(self, "lr_schedule", tuple(float(v) for v in self.lr_schedule))

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule is None:
            return self.lr
        return self.lr_schedule[min(epoch, len(self.lr_schedule) - 1)]


def trainable_groups(trainable: str) -> tuple[str, ...]:
    groups = {
        "all": ("weights", "biases", "gammas", "betas"),
        "bn_only": ("biases", "gammas", "betas"),
        "bias_only": ("biases",),
        "none": (),
    }
    if trainable not in groups:
        raise ValueError(f"trainable must be one of {TRAINABLE}, got {trainable!r}")
    return groups[trainable]


def train(model: QuantModel, x, y, cfg: TrainConfig, trainable: str = "all",
          plan: MultPlan | None = None, noise=None, log=None) -> QuantModel:
    """SGD with momentum on softmax cross-entropy; returns an updated copy.

    Without ``plan`` the network trains in real arithmetic; with a plan the
    forward pass is quantized through the plan's multipliers.
    """
    groups = trainable_groups(trainable)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("training set is empty")
    out = model.copy()
    if not groups or cfg.epochs == 0:
        return out
    quantized = plan is not None
    rng = np.random.default_rng(cfg.seed)
    velocity = {(grp, k): np.zeros_like(getattr(out, grp)[k])
                for grp in groups for k in range(out.n_layers) if getattr(out, grp)[k] is not None}
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            fwd = forward(out, x[idx], plan, noise=noise, seed=int(rng.integers(2 ** 63)),
                          quantized=quantized, bn_mode=cfg.bn_mode, keep=True)
            loss, dlogits = softmax_cross_entropy(fwd.logits, y[idx])
            total += loss * len(idx)
            grads = backward(out, fwd, dlogits, bn_mode=cfg.bn_mode)
            for (grp, k), v in velocity.items():
                p = getattr(out, grp)[k]
                gk = getattr(grads, grp)[k]
                if cfg.weight_decay and grp == "weights":
                    gk = gk + cfg.weight_decay * p
                v *= cfg.momentum
                v += gk
                getattr(out, grp)[k] = p - lr * v
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:g} loss={total / n:.4f}")
    return out


def predict(model: QuantModel, x, plan: MultPlan | None = None, batch_size: int = 256,
            quantized: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    preds = [forward(model, x[s:s + batch_size], plan, quantized=quantized).logits.argmax(1)
             for s in range(0, x.shape[0], batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: QuantModel, x, y, plan: MultPlan | None = None, batch_size: int = 256,
             quantized: bool = True) -> float:
    """Top-1 accuracy; ties in the logits go to the lowest class index."""
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("evaluation set is empty")
    return float((predict(model, x, plan, batch_size, quantized) == y).mean())


# --------------------------------------------------------------------------
# parameter accounting


def _op_point_sizes(model: QuantModel, retrain: str) -> int:
    if retrain == "bias":
        return sum(b.size for b in model.biases)
    if retrain == "bn":
        return sum(b.size for b in model.biases) + sum(
            g.size + b.size for g, b in zip(model.gammas, model.betas) if g is not None)
    raise ValueError(f"unknown retrain mode {retrain!r}")


def count_params(model: QuantModel, mode: str = "shared_only", o: int = 1, retrain: str = "bn") -> int:
    """Parameter count of a model, optionally with ``o`` specialized operating points.

    ``retrain`` selects what each operating point owns: ``bias`` (biases),
    ``bn`` (biases, gamma, beta) or ``full`` (everything).
    """
    if o < 1:
        raise ValueError("o must be >= 1")
    total = (sum(w.size for w in model.weights) + sum(b.size for b in model.biases)
             + sum(g.size + b.size for g, b in zip(model.gammas, model.betas) if g is not None))
    if mode == "shared_only":
        return total
    if mode != "per_op_point":
        raise ValueError(f"unknown count mode {mode!r}")
    if retrain == "full":
        return o * total
    per_op = _op_point_sizes(model, retrain)
    return total - per_op + o * per_op
