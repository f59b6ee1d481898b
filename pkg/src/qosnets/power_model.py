"""Relative multiplication power of an operating plan.

Power of an operating point is the multiplication-count weighted mean of the
assigned multipliers' relative power; switching cost is not modeled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .am_models import AmLibrary
from .qnn import LayerSpec, QuantModel

NON_MULTIPLYING = ("maxpool", "bn", "batchnorm", "relu", "flatten")


@dataclass
class PowerReport:
    per_layer_mults: list[int]
    per_op_power: list[float]
    per_op_accuracy: list[float] | None = None


def mult_count(layer, input_hw: tuple[int, int] | None = None) -> int:
    """Multiplications per sample of one layer.

    ``layer`` is a :class:`LayerSpec` or the name of a non-multiplying op.
    """
    if isinstance(layer, str):
        if layer.lower() in NON_MULTIPLYING:
            return 0
        raise ValueError(f"unknown layer kind {layer!r}")
    spec: LayerSpec = layer
    if spec.kind == "dense":
        return spec.in_features * spec.out_features
    if input_hw is None or len(input_hw) != 2 or min(input_hw) < 1:
        raise ValueError(f"conv layer needs a valid (H, W) input size, got {input_hw}")
    oh, ow = spec.output_hw(*input_hw)
    if oh < 1 or ow < 1:
        raise ValueError(f"input {input_hw} too small for {spec}")
    return oh * ow * spec.out_features * spec.in_features * spec.kernel ** 2


def layer_mult_counts(model: QuantModel) -> list[int]:
    shapes = model.layer_input_shapes()
    return [mult_count(spec, shapes[k][1:] if spec.kind == "conv2d" else None)
            for k, spec in enumerate(model.layers)]


def op_point_power(layer_ams, mults, library: AmLibrary) -> float:
    mults = np.asarray(mults, dtype=np.float64)
    powers = np.array([library.by_name(a).relative_power for a in layer_ams])
    return float((mults * powers).sum() / mults.sum())


def relative_power(plan, model: QuantModel, library: AmLibrary) -> PowerReport:
    mults = layer_mult_counts(model)
    per_op = []
    for op in range(plan.o):
        missing = [k for k in range(model.n_layers) if (op, k) not in plan.assignment]
        if missing:
            raise ValueError(f"operating point {op} has no multiplier for layers {missing}")
        per_op.append(op_point_power(plan.layer_ams(op), mults, library))
    return PowerReport(mults, per_op)
