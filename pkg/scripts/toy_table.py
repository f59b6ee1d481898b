"""Toy power/accuracy table over several seeds.

Runs the whole pipeline once per seed (modes none, bn, full), prints the
per-operating-point rows and the qualitative trend checks, and reports how
many seeds pass all of them.
"""

import argparse
from pathlib import Path

from qosnets.config import PipelineConfig, load_config
from qosnets.pipeline import cmd_evaluate, cmd_finetune, cmd_select, cmd_sensitivity, cmd_train, trend_checks
from qosnets.results import read_results


def run_seed(cfg, modes):
    cmd_train(cfg, None)
    cmd_sensitivity(cfg, None)
    cmd_select(cfg, None)
    cmd_evaluate(cfg, "none", None)
    for mode in modes:
        cmd_finetune(cfg, mode, None)
        cmd_evaluate(cfg, mode, None)


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", type=Path, default=Path("runs/toy_table"))
    p.add_argument("--modes", nargs="+", default=["bn", "full"])
    args = p.parse_args()
    base = load_config(args.config) if args.config else PipelineConfig()

    passed = 0
    for seed in args.seeds:
        cfg = base.with_seed(seed)
        cfg.output_dir = str((args.out / f"seed{seed}").resolve())
        run_seed(cfg, args.modes)
        out = Path(cfg.output_dir)
        print(f"seed {seed}")
        for mode in ["none"] + args.modes:
            for r in read_results(out / f"results_{mode}.csv"):
                print(f"  {mode:<5} op={r.op_point!s:<8} power={r.relative_power:.4f} "
                      f"acc={r.accuracy:.4f} loss={r.loss_pp:6.2f}pp params={r.params}")
        checks = trend_checks(out)
        for name, ok in checks.items():
            print(f"  {'PASS' if ok else 'FAIL'} {name}")
        passed += all(checks.values())
    print(f"{passed}/{len(args.seeds)} seeds pass every check")


if __name__ == "__main__":
    main()
