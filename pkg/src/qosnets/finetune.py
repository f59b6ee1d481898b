"""Per-operating-point fine-tuning over shared weights.

Every operating point owns a private copy of the biases and BatchNorm affine
parameters; weights are shared (mode ``full`` adds a private weight copy for
comparison runs).  Switching operating points swaps which small parameter set
and which multiplier assignment the forward pass uses.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .am_models import AmLibrary
from .error_stats import channel_error_means
from .qnn import MultPlan, QuantModel, TrainConfig, count_params, evaluate, forward, train
from .selection import OperatingPlan

MODES = ("bias", "bn", "full")
_TRAINABLE = {"bias": "bias_only", "bn": "bn_only", "full": "all"}


@dataclass
class OpPointParams:
    biases: list[np.ndarray]
    gammas: list[np.ndarray | None]
    betas: list[np.ndarray | None]
    weights: list[np.ndarray] | None = None

    @classmethod
    def from_model(cls, model: QuantModel, with_weights: bool = False) -> "OpPointParams":
        cp = lambda v: None if v is None else v.copy()  # noqa: E731
        return cls([b.copy() for b in model.biases], [cp(g) for g in model.gammas],
                   [cp(b) for b in model.betas],
                   [w.copy() for w in model.weights] if with_weights else None)

    def apply(self, model: QuantModel) -> QuantModel:
        """A model view using these parameters; shared tensors are not copied."""
        return replace(model, biases=list(self.biases), gammas=list(self.gammas),
                       betas=list(self.betas),
                       weights=list(self.weights) if self.weights is not None else list(model.weights))

    @property
    def n_values(self) -> int:
        n = sum(b.size for b in self.biases)
        n += sum(g.size + b.size for g, b in zip(self.gammas, self.betas) if g is not None)
        if self.weights is not None:
            n += sum(w.size for w in self.weights)
        return n


@dataclass
class DeployedModel:
    model: QuantModel
    op_params: list[OpPointParams]
    plan: OperatingPlan
    library: AmLibrary
    active: int = 0

    def __post_init__(self):
        if len(self.op_params) != self.plan.o:
            raise ValueError(f"{len(self.op_params)} parameter sets for {self.plan.o} operating points")
        if not 0 <= self.active < self.plan.o:
            raise IndexError(f"active operating point {self.active} out of range")

    @property
    def o(self) -> int:
        return self.plan.o

    def mult_plan(self, op: int | None = None) -> MultPlan:
        op = self.active if op is None else op
        return MultPlan.from_names(self.plan.layer_ams(op), self.library)

    def view(self, op: int | None = None) -> QuantModel:
        op = self.active if op is None else op
        return self.op_params[op].apply(self.model)

    def forward(self, x):
        return forward(self.view(), x, self.mult_plan()).logits

    def evaluate(self, x, y, op: int | None = None) -> float:
        return evaluate(self.view(op), x, y, self.mult_plan(op))


def deploy(model: QuantModel, plan: OperatingPlan, library: AmLibrary) -> DeployedModel:
    """Every operating point starts from the shared parameters (no retraining)."""
    if not model.calibrated:
        raise ValueError("deploy needs a calibrated model")
    if plan.n_layers != model.n_layers:
        raise ValueError(f"plan covers {plan.n_layers} layers, model has {model.n_layers}")
    return DeployedModel(model, [OpPointParams.from_model(model) for _ in range(plan.o)], plan, library)


def bias_compensate(model: QuantModel, plan: OperatingPlan, op: int, x_calib,
                    library: AmLibrary) -> OpPointParams:
    """Shift each channel's bias by minus its measured mean local error."""
    ams = [library.by_name(a) for a in plan.layer_ams(op)]
    means = channel_error_means(model, ams, x_calib)
    params = OpPointParams.from_model(model)
    params.biases = [b - mu for b, mu in zip(model.biases, means)]
    return params


def finetune_op_point(deployed: DeployedModel, op: int, x, y, cfg: TrainConfig, mode: str = "bn",
                      x_calib=None, log=None) -> DeployedModel:
    """Bias-compensate then retrain operating point ``op`` through its approximate forward path.

    ``bias`` trains biases, ``bn`` biases and BN gamma/beta, ``full`` also a
    private weight copy.  Shared weights are never modified.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not 0 <= op < deployed.o:
        raise IndexError(f"operating point {op} out of range (o={deployed.o})")
    if len(y) == 0:
        raise ValueError("fine-tuning set is empty")
    x_calib = x if x_calib is None else x_calib
    init = bias_compensate(deployed.model, deployed.plan, op, x_calib, deployed.library)
    if mode == "full":
        init.weights = [w.copy() for w in deployed.model.weights]
    cfg = replace(cfg, bn_mode="frozen")
    trained = train(init.apply(deployed.model), x, y, cfg, trainable=_TRAINABLE[mode],
                    plan=deployed.mult_plan(op), log=log)
    deployed.op_params[op] = OpPointParams.from_model(trained, with_weights=mode == "full")
    return deployed


def switch_operating_point(deployed: DeployedModel, op: int) -> DeployedModel:
    if not 0 <= op < deployed.o:
        raise IndexError(f"operating point {op} out of range (o={deployed.o})")
    deployed.active = op
    return deployed


def overhead_ratio(model: QuantModel, o: int, mode: str = "bn") -> float:
    """Extra parameters of ``o`` specialized operating points relative to the shared model."""
    shared = count_params(model, "shared_only")
    return (count_params(model, "per_op_point", o, retrain=mode) - shared) / shared
