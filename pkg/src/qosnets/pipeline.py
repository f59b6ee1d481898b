"""Stage-by-stage pipeline: train, sensitivity, select, finetune, evaluate, report.

Each stage reads the config plus files written by earlier stages in the
output directory and writes its own file there:

    model.ckpt            train        calibrated baseline
    plan_sigma.json       sensitivity  per-layer noise tolerance
    plan.json             select       operating plan with power report
    deployed_{mode}.ckpt  finetune     shared model + per-operating-point params
    results_{mode}.csv    evaluate     one baseline row + one row per operating point
    report.txt, pareto.csv  report     power/loss table with Pareto flags

No timestamps or host details are recorded, so reruns with the same config
produce byte-identical files.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .am_models import AmLibrary, load_am_library, truncation_library
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig
from .data import Dataset, DatasetError, load_idx_dataset, synthetic_digits
from .error_stats import measure_error_matrix
from .finetune import MODES, DeployedModel, deploy, finetune_op_point
from .power_model import relative_power
from .qnn import TrainConfig, UncalibratedError, calibrate, count_params, evaluate, toy_cnn, train
from .results import (BASELINE, ResultsRow, format_report, pareto_report, read_results,
                      write_pareto_csv, write_results)
from .selection import OperatingPlan, config_hash, select
from .sensitivity import search_sigma

FRAGMENT_FORMAT = "qosnets-plan-fragment/1"
EVAL_MODES = MODES + ("none",)


class PipelineError(RuntimeError):
    pass


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def _say(msg: str, log=print):
    if log is not None:
        log(msg)


def output_dir(cfg: PipelineConfig) -> Path:
    out = cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_splits(cfg: PipelineConfig) -> Splits:
    d = cfg.dataset
    if d.source == "synthetic":
        ds = synthetic_digits(d.n_train + d.n_val + d.n_test, seed=d.seed, size=cfg.model.input_hw)
        tr, va, te = ds.split([d.n_train, d.n_val, d.n_test], seed=d.split_seed)
        return Splits(tr, va, te)
    paths = [cfg.resolve(p) for p in (d.train_images, d.train_labels, d.test_images, d.test_labels)]
    if any(p is None for p in paths):
        raise DatasetError("idx source needs train_images, train_labels, test_images and test_labels")
    full = load_idx_dataset(paths[0], paths[1])
    tr, va = full.split([d.n_train, d.n_val], seed=d.split_seed)
    te = load_idx_dataset(paths[2], paths[3], limit=d.n_test)
    hw = tr.x.shape[-1]
    if tr.x.shape[-2:] != (cfg.model.input_hw, cfg.model.input_hw) or te.x.shape[-1] != hw:
        raise DatasetError(f"{paths[0]}: image size {tr.x.shape[-2:]} does not match "
                           f"model.input_hw={cfg.model.input_hw}")
    return Splits(tr, va, te)


def load_library(cfg: PipelineConfig) -> AmLibrary:
    path = cfg.resolve(cfg.library.path)
    if path is not None:
        return load_am_library(path)
    return truncation_library(cfg.library.truncation)


def _read_json(path: Path, stage: str) -> dict:
    if not path.exists():
        raise PipelineError(f"{path} not found; run the '{stage}' stage first")
    return json.loads(path.read_text())


def _load_model(out: Path):
    path = out / "model.ckpt"
    if not path.exists():
        raise PipelineError(f"{path} not found; run the 'train' stage first")
    model, _, meta = load_checkpoint(path)
    return model, meta


def _load_plan(out: Path) -> OperatingPlan:
    path = out / "plan.json"
    if not path.exists():
        raise PipelineError(f"{path} not found; run the 'select' stage first")
    return OperatingPlan.from_json(path.read_text())


def _provenance(cfg: PipelineConfig) -> dict:
    settings = cfg.to_dict()
    settings.pop("output_dir")  # where results land does not change them
    return {"config_hash": config_hash(settings),
            "seeds": {"dataset": cfg.dataset.seed, "split": cfg.dataset.split_seed,
                      "model": cfg.model.seed, "train": cfg.train.seed,
                      "sensitivity": cfg.sensitivity.seed, "selection": cfg.selection.seed,
                      "finetune": cfg.finetune.seed}}


def cmd_train(cfg: PipelineConfig, log=print) -> Path:
    splits = load_splits(cfg)
    t = cfg.train
    tc = TrainConfig(lr=t.lr, momentum=t.momentum, epochs=t.epochs, batch_size=t.batch_size,
                     seed=t.seed, lr_schedule=tuple(t.lr_schedule) if t.lr_schedule else None,
                     bn_mode="batch")
    model = toy_cnn(input_hw=cfg.model.input_hw, seed=cfg.model.seed, width=tuple(cfg.model.width))
    model = train(model, splits.train.x, splits.train.y, tc, log=log)
    model = calibrate(model, splits.val.x[:cfg.calibration_samples])
    float_acc = evaluate(model, splits.test.x, splits.test.y, quantized=False)
    acc = evaluate(model, splits.test.x, splits.test.y)
    meta = {"stage": "train", "baseline_accuracy": acc, "float_accuracy": float_acc,
            "provenance": _provenance(cfg)}
    path = save_checkpoint(output_dir(cfg) / "model.ckpt", model, meta=meta)
    _say(f"baseline accuracy {acc:.4f} (float {float_acc:.4f}) -> {path}", log)
    return path


def cmd_sensitivity(cfg: PipelineConfig, log=print) -> Path:
    out = output_dir(cfg)
    model, _ = _load_model(out)
    if not model.calibrated:
        raise UncalibratedError(f"{out / 'model.ckpt'} is not calibrated")
    splits = load_splits(cfg)
    sg = search_sigma(model, splits.train.x, splits.train.y, cfg.sensitivity, log=log)
    doc = {"format": FRAGMENT_FORMAT, "sigma_g": [float(v) for v in sg.sigma],
           "sigma_max": sg.sigma_max, "lambda": cfg.sensitivity.lam,
           "history": [[float(v) for v in h] for h in sg.history], "provenance": _provenance(cfg)}
    path = out / "plan_sigma.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    for k, v in enumerate(sg.sigma):
        _say(f"layer {k}: sigma_g={v:.5f}", log)
    return path


def cmd_select(cfg: PipelineConfig, log=print) -> Path:
    out = output_dir(cfg)
    model, _ = _load_model(out)
    frag = _read_json(out / "plan_sigma.json", "sensitivity")
    if frag.get("format") != FRAGMENT_FORMAT:
        raise PipelineError(f"{out / 'plan_sigma.json'}: unexpected format {frag.get('format')!r}")
    sigma_g = np.asarray(frag["sigma_g"], dtype=np.float64)
    if sigma_g.shape != (model.n_layers,):
        raise PipelineError(f"sigma_g has {sigma_g.size} entries, model has {model.n_layers} layers")
    library = load_library(cfg)
    if len(library) == 1:
        print("warning: multiplier library holds only the accurate multiplier; "
              "plan is accurate-only", file=sys.stderr)
    splits = load_splits(cfg)
    sc = cfg.selection
    em = measure_error_matrix(model, library, splits.val.x, seed=sc.seed, max_samples=sc.error_samples)
    n = min(sc.n, model.n_layers * cfg.o)
    if n < sc.n:
        print(f"warning: n={sc.n} exceeds the {n} preference vectors; using n={n}", file=sys.stderr)
    plan = select(em, sigma_g, library, S=tuple(sc.scale_set), n=n, seed=sc.seed, n_init=sc.n_init)
    report = relative_power(plan, model, library)
    plan.relative_power = [float(p) for p in report.per_op_power]
    plan.provenance.update(_provenance(cfg))
    plan.provenance["mults_per_layer"] = [int(m) for m in report.per_layer_mults]
    path = out / "plan.json"
    path.write_text(plan.to_json())
    for op in range(plan.o):
        _say(f"op {op} (s={plan.scale_set.scales[op]}): power={plan.relative_power[op]:.4f} "
             f"ams={plan.layer_ams(op)}", log)
    return path


def _finetune_train_config(cfg: PipelineConfig) -> TrainConfig:
    f = cfg.finetune
    return TrainConfig(lr=f.lr_schedule[0], momentum=f.momentum, epochs=f.epochs,
                       batch_size=f.batch_size, seed=f.seed, lr_schedule=tuple(f.lr_schedule),
                       bn_mode="frozen")


def cmd_finetune(cfg: PipelineConfig, mode: str = "bn", log=print) -> Path:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    out = output_dir(cfg)
    model, _ = _load_model(out)
    plan = _load_plan(out)
    library = load_library(cfg)
    splits = load_splits(cfg)
    dep = deploy(model, plan, library)
    tc = _finetune_train_config(cfg)
    x_calib = splits.val.x[:cfg.finetune.calib_samples]
    for op in range(plan.o):
        finetune_op_point(dep, op, splits.train.x, splits.train.y, tc, mode, x_calib=x_calib)
        _say(f"op {op}: val accuracy {dep.evaluate(splits.val.x, splits.val.y, op):.4f}", log)
    meta = {"stage": "finetune", "mode": mode, "params": count_params(model, "per_op_point", plan.o, mode),
            "shared_params": count_params(model, "shared_only"), "provenance": _provenance(cfg)}
    path = save_checkpoint(out / f"deployed_{mode}.ckpt", model, dep.op_params, meta)
    _say(f"{mode}: {meta['params']} parameters for {plan.o} operating points -> {path}", log)
    return path


def _deployed(out: Path, mode: str, plan: OperatingPlan, library: AmLibrary) -> DeployedModel:
    if mode == "none":
        model, _ = _load_model(out)
        return deploy(model, plan, library)
    path = out / f"deployed_{mode}.ckpt"
    if not path.exists():
        raise PipelineError(f"{path} not found; run 'finetune --mode {mode}' first")
    model, op_params, _ = load_checkpoint(path)
    return DeployedModel(model, op_params, plan, library)


def cmd_evaluate(cfg: PipelineConfig, mode: str = "bn", log=print) -> Path:
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    out = output_dir(cfg)
    plan = _load_plan(out)
    library = load_library(cfg)
    dep = _deployed(out, mode, plan, library)
    test = load_splits(cfg).test
    if len(test) == 0:
        raise PipelineError("test split is empty")
    seed = cfg.model.seed
    shared = count_params(dep.model, "shared_only")
    params = shared if mode == "none" else count_params(dep.model, "per_op_point", plan.o, mode)
    base = evaluate(dep.model, test.x, test.y)
    rows = [ResultsRow(BASELINE, 1.0, base, 0.0, mode, shared, seed)]
    powers = plan.relative_power or relative_power(plan, dep.model, library).per_op_power
    for op in range(plan.o):
        acc = dep.evaluate(test.x, test.y, op)
        rows.append(ResultsRow(op, float(powers[op]), acc, 100.0 * (base - acc), mode, params, seed))
    path = write_results(out / f"results_{mode}.csv", rows)
    for r in rows:
        _say(f"{mode} op={r.op_point}: power={r.relative_power:.4f} acc={r.accuracy:.4f} "
             f"loss={r.loss_pp:.2f}pp", log)
    return path


def cmd_report(cfg: PipelineConfig, results=None, log=print) -> Path:
    out = output_dir(cfg)
    paths = [Path(p) for p in results] if results else sorted(out.glob("results_*.csv"))
    if not paths:
        raise PipelineError(f"no results_*.csv in {out}; run the 'evaluate' stage first")
    rows = [r for p in paths for r in read_results(p)]
    ordered, flags = pareto_report(rows)
    text = format_report(ordered, flags)
    (out / "report.txt").write_text(text)
    write_pareto_csv(out / "pareto.csv", ordered, flags)
    _say(text.rstrip("\n"), log)
    return out / "report.txt"


def run_all(cfg: PipelineConfig, modes=MODES, log=print) -> Path:
    cmd_train(cfg, log)
    cmd_sensitivity(cfg, log)
    cmd_select(cfg, log)
    cmd_evaluate(cfg, "none", log)
    for mode in modes:
        cmd_finetune(cfg, mode, log)
        cmd_evaluate(cfg, mode, log)
    return cmd_report(cfg, log=log)


def load_stage_outputs(out) -> dict:
    """Raw bytes of every stage file present in ``out``, keyed by file name."""
    out = Path(out)
    names = ["model.ckpt", "plan_sigma.json", "plan.json", "report.txt", "pareto.csv"]
    names += [p.name for p in sorted(out.glob("deployed_*.ckpt"))]
    names += [p.name for p in sorted(out.glob("results_*.csv"))]
    return {n: (out / n).read_bytes() for n in names if (out / n).exists()}


def trend_checks(out, max_overhead: float = 0.05, min_drop_pp: float = 10.0,
                 max_gap_pp: float = 2.0) -> dict[str, bool]:
    """Qualitative checks on a finished run with ``none``, ``bn`` and ``full`` results."""
    out = Path(out)
    res = {m: read_results(out / f"results_{m}.csv") for m in ("none", "bn", "full")}
    ops = {m: {r.op_point: r for r in rows if r.op_point != BASELINE} for m, rows in res.items()}
    base = next(r for r in res["none"] if r.op_point == BASELINE).accuracy
    aggressive = min(ops["none"], key=lambda op: ops["none"][op].relative_power)
    model, _ = _load_model(out)
    o = len(ops["bn"])
    shared = count_params(model, "shared_only")
    overhead = (count_params(model, "per_op_point", o, "bn") - shared) / shared
    return {
        "baseline_accuracy": base >= 0.95,
        "no_retrain_drop": 100.0 * (base - ops["none"][aggressive].accuracy) >= min_drop_pp,
        "bn_close_to_full": all(100.0 * (ops["full"][op].accuracy - ops["bn"][op].accuracy) <= max_gap_pp
                                for op in ops["bn"]),
        "bn_overhead": overhead <= max_overhead,
        "power_decreases": len({r.relative_power for r in ops["bn"].values()}) >= 2,
    }
