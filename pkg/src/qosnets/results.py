"""Results CSV rows and the power/accuracy-loss Pareto report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

HEADER = ["op_point", "relative_power", "accuracy", "loss_pp", "mode", "params", "seed"]
BASELINE = "baseline"


class ResultsError(ValueError):
    pass


@dataclass(frozen=True)
class ResultsRow:
    op_point: int | str  # operating point index, or "baseline"
    relative_power: float
    accuracy: float
    loss_pp: float
    mode: str
    params: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ResultsError(f"accuracy {self.accuracy} outside [0, 1]")
        if not 0.0 < self.relative_power <= 1.0:
            raise ResultsError(f"relative power {self.relative_power} outside (0, 1]")

    def as_record(self) -> list[str]:
        return [str(self.op_point), repr(float(self.relative_power)), repr(float(self.accuracy)),
                repr(float(self.loss_pp)), self.mode, str(self.params), str(self.seed)]


def write_results(path, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow(r.as_record())
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def read_results(path) -> list[ResultsRow]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ResultsError(f"{path}: cannot read ({e})") from None
    reader = csv.reader(lines)
    header = next(reader, None)
    if header != HEADER:
        raise ResultsError(f"{path}:1: expected header {','.join(HEADER)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(HEADER):
            raise ResultsError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(rec)}")
        try:
            op = rec[0] if rec[0] == BASELINE else int(rec[0])
            rows.append(ResultsRow(op, float(rec[1]), float(rec[2]), float(rec[3]), rec[4],
                                   int(rec[5]), int(rec[6])))
        except ValueError as e:
            raise ResultsError(f"{path}:{lineno}: {e}") from None
    return rows


def pareto_flags(rows) -> list[bool]:
    """True where another row of the same mode has no more power and no more loss, and less of one.

    Modes are separate deployments, so rows are only compared within a mode.
    """
    flags = []
    for r in rows:
        flags.append(any(
            o.mode == r.mode and o.relative_power <= r.relative_power and o.loss_pp <= r.loss_pp
            and (o.relative_power < r.relative_power or o.loss_pp < r.loss_pp)
            for o in rows))
    return flags


def pareto_report(rows) -> tuple[list[ResultsRow], list[bool]]:
    """Rows sorted by power (descending, then loss ascending) with dominated flags."""
    unique = list(dict.fromkeys(rows))
    ordered = sorted(unique, key=lambda r: (-r.relative_power, r.loss_pp, r.mode, str(r.op_point)))
    return ordered, pareto_flags(ordered)


def format_report(rows, flags) -> str:
    lines = [f"{'mode':<6} {'op':>8} {'power':>8} {'acc':>8} {'loss[pp]':>9} {'params':>8}  pareto"]
    for r, dom in zip(rows, flags):
        lines.append(f"{r.mode:<6} {str(r.op_point):>8} {r.relative_power:>8.2%} {r.accuracy:>8.2%} "
                     f"{r.loss_pp:>9.2f} {r.params:>8}  {'dominated' if dom else 'optimal'}")
    return "\n".join(lines) + "\n"


def write_pareto_csv(path, rows, flags) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "op_point", "relative_power", "loss_pp", "dominated"])
    for r, dom in zip(rows, flags):
        w.writerow([r.mode, r.op_point, repr(float(r.relative_power)), repr(float(r.loss_pp)), int(dom)])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path
