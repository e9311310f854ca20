"""Mean +- std tables per architecture, with collapsed runs parenthesized."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from ..report import MetricReport


@dataclass
class SummaryCell:
    architecture: str
    metric: str
    mean: float
    std: float
    n: int
    collapsed: bool

    @property
    def text(self) -> str:
        s = f"{self.mean:.2f}±{self.std:.2f}"
        return f"({s})" if self.collapsed else s


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def summarize(report: MetricReport, by: str = "architecture") -> dict:
    """Cells keyed by (group, metric) and the best non-collapsed group per metric.

    Failed rows are skipped.  A cell containing any collapsed run is
    parenthesized and cannot be a best.
    """
    if not len(report):
        raise ValueError("empty report")
    groups: dict[tuple, list] = {}
    for r in report:
        if r.failed or r.value is None or math.isnan(r.value):
            continue
        group = r.architecture if by == "architecture" else f"{r.architecture}-{r.digest}"
        groups.setdefault((group, r.metric), []).append(r)

    cells = {}
    for (group, metric), rows in sorted(groups.items()):
        mean, std = mean_std([r.value for r in rows])
        cells[(group, metric)] = SummaryCell(group, metric, mean, std, len(rows), any(r.collapsed for r in rows))

    best = {}
    for metric in sorted({m for _, m in cells}):
        candidates = [c for (g, m), c in cells.items() if m == metric and not c.collapsed]
        if candidates:
            lower_is_better = metric == "rec"
            pick = min if lower_is_better else max
            best[metric] = pick(candidates, key=lambda c: c.mean).architecture
    return {"cells": cells, "best": best}


def format_table(summary: dict) -> str:
    cells = summary["cells"]
    groups = sorted({g for g, _ in cells})
    metrics = sorted({m for _, m in cells})
    width = max([12, *(len(g) for g in groups)])
    lines = ["".ljust(width) + "".join(m.rjust(14) for m in metrics)]
    for g in groups:
        row = g.ljust(width)
        for m in metrics:
            c = cells.get((g, m))
            text = "-" if c is None else c.text + ("*" if summary["best"].get(m) == g else "")
            row += text.rjust(14)
        lines.append(row)
    lines.append("* best per metric among non-collapsed groups; parentheses mark collapsed runs")
    return "\n".join(lines)


def write_summary_csv(summary: dict, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "metric", "mean", "std", "n", "collapsed", "best"])
        for (g, m), c in sorted(summary["cells"].items()):
            w.writerow([g, m, repr(c.mean), repr(c.std), c.n, int(c.collapsed), int(summary["best"].get(m) == g)])
