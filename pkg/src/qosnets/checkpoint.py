"""Binary model checkpoints.

Layout (all integers little endian)::

    offset      size   content
    0           8      magic b"QOSCKPT\\0"
    8           4      format version (uint32, currently 1)
    12          8      header length H in bytes (uint64)
    20          H      UTF-8 JSON header, keys sorted
    20 + H      ...    tensor payload: float64 little-endian arrays, back to back

The header holds ``layers`` (LayerSpec fields), ``input_shape``,
``act_qparams`` / ``weight_qparams`` (``[scale, zero_point]`` or null),
``meta`` (free-form), ``op_points`` (number of operating-point sections) and
``tensors``: a list of ``{"name", "shape", "offset"}`` with offsets counted in
float64 elements from the start of the payload.  Tensor names are
``layer{k}.{weight,bias,gamma,beta,running_mean,running_var}``, ``output_std``,
and for operating point ``i`` ``op{i}.layer{k}.{bias,gamma,beta[,weight]}``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .finetune import OpPointParams
from .qnn import LayerSpec, QuantModel, QuantParams

MAGIC = b"QOSCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _model_tensors(model: QuantModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for k in range(model.n_layers):
        out.append((f"layer{k}.weight", model.weights[k]))
        out.append((f"layer{k}.bias", model.biases[k]))
        if model.layers[k].has_bn:
            out += [(f"layer{k}.gamma", model.gammas[k]), (f"layer{k}.beta", model.betas[k]),
                    (f"layer{k}.running_mean", model.running_mean[k]),
                    (f"layer{k}.running_var", model.running_var[k])]
    if model.output_std is not None:
        out.append(("output_std", model.output_std))
    return out


def _op_tensors(i: int, params) -> list[tuple[str, np.ndarray]]:
    out = []
    for k, b in enumerate(params.biases):
        out.append((f"op{i}.layer{k}.bias", b))
        if params.gammas[k] is not None:
            out += [(f"op{i}.layer{k}.gamma", params.gammas[k]), (f"op{i}.layer{k}.beta", params.betas[k])]
        if params.weights is not None:
            out.append((f"op{i}.layer{k}.weight", params.weights[k]))
    return out


def _qp(p):
    return None if p is None else [p.scale, p.zero_point]


def save_checkpoint(path, model: QuantModel, op_params=None, meta: dict | None = None) -> Path:
    tensors = _model_tensors(model)
    for i, params in enumerate(op_params or []):
        tensors += _op_tensors(i, params)
    index, offset = [], 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "layers": [asdict(s) for s in model.layers],
        "input_shape": list(model.input_shape),
        "act_qparams": [_qp(p) for p in model.act_qparams],
        "weight_qparams": [_qp(p) for p in model.weight_qparams],
        "op_points": len(op_params or []),
        "meta": meta or {},
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        f.write(hbytes)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Returns ``(model, op_params, meta)``; ``op_params`` is a list, empty if none stored."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read ({e})") from None
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: too short")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a qosnets checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    payload = np.frombuffer(raw[_PREFIX.size + hlen:], dtype="<f8")
    t = {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"]))
        if e["offset"] + size > payload.size:
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        t[e["name"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)

    layers = [LayerSpec(**d) for d in header["layers"]]
    L = len(layers)
    get = lambda name: t.get(name)  # noqa: E731
    qp = lambda v: None if v is None else QuantParams(float(v[0]), int(v[1]))  # noqa: E731
    model = QuantModel(
        layers, tuple(header["input_shape"]),
        [get(f"layer{k}.weight") for k in range(L)], [get(f"layer{k}.bias") for k in range(L)],
        [get(f"layer{k}.gamma") for k in range(L)], [get(f"layer{k}.beta") for k in range(L)],
        [get(f"layer{k}.running_mean") for k in range(L)], [get(f"layer{k}.running_var") for k in range(L)],
        [qp(v) for v in header["act_qparams"]], [qp(v) for v in header["weight_qparams"]],
        get("output_std"),
    )
    op_params = []
    for i in range(header["op_points"]):
        has_w = f"op{i}.layer0.weight" in t
        op_params.append(OpPointParams(
            [get(f"op{i}.layer{k}.bias") for k in range(L)],
            [get(f"op{i}.layer{k}.gamma") for k in range(L)],
            [get(f"op{i}.layer{k}.beta") for k in range(L)],
            [get(f"op{i}.layer{k}.weight") for k in range(L)] if has_w else None,
        ))
    return model, op_params, header["meta"]
