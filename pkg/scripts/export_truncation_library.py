"""Write the truncation multipliers as .amlut files, e.g. for ``library.path``."""

import argparse
from pathlib import Path

from qosnets.am_models import am_summary, make_truncation_am, save_am


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out", type=Path)
    p.add_argument("--ks", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    args = p.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for k in args.ks:
        am = make_truncation_am(k)
        path = save_am(am, args.out)
        mean, std, worst = am_summary(am)
        print(f"{path}: power={am.relative_power:.4f} mean_err={mean:.1f} std={std:.1f} max|err|={worst}")


if __name__ == "__main__":
    main()
