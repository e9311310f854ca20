"""Metric records and their CSV form, the exchange format between runs and reports."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path

COLUMNS = ("dataset", "architecture", "digest", "seed", "metric", "value", "sampler", "flags")


@dataclass(frozen=True)
class MetricRow:
    dataset: str
    architecture: str
    digest: str
    seed: int
    metric: str
    value: float
    sampler: str = ""
    flags: str = ""

    @property
    def key(self) -> tuple:
        return (self.dataset, self.architecture, self.digest, self.seed, self.metric)

    @property
    def collapsed(self) -> bool:
        return "collapsed" in self.flags.split("|")

    @property
    def failed(self) -> bool:
        return "failed" in self.flags.split("|")

    def to_record(self) -> list[str]:
        value = "" if self.value is None or (isinstance(self.value, float) and math.isnan(self.value)) else repr(float(self.value))
        return [self.dataset, self.architecture, self.digest, str(self.seed), self.metric, value, self.sampler, self.flags]

    @classmethod
    def from_record(cls, rec: dict) -> "MetricRow":
        value = rec["value"]
        return cls(rec["dataset"], rec["architecture"], rec["digest"], int(rec["seed"]), rec["metric"],
                   float(value) if value != "" else float("nan"), rec.get("sampler", ""), rec.get("flags", ""))


class MetricReport:
    """Ordered metric rows, unique on (dataset, architecture, digest, seed, metric)."""

    def __init__(self, rows=()):
        self.rows: list[MetricRow] = []
        self._keys: set[tuple] = set()
        for r in rows:
            self.add(r)

    def add(self, row: MetricRow) -> None:
        if row.key in self._keys:
            raise ValueError(f"duplicate metric row {row.key}")
        self._keys.add(row.key)
        self.rows.append(row)

    def extend(self, rows) -> None:
        for r in rows:
            self.add(r)

    def __contains__(self, key) -> bool:
        return key in self._keys

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(r.to_record())
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path: str | os.PathLike) -> "MetricReport":
        path = Path(path)
        if not path.exists():
            return cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != COLUMNS:
                raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
            return cls(MetricRow.from_record(rec) for rec in reader)


def append_rows(path: str | os.PathLike, rows) -> None:
    """Append rows to a metrics CSV, writing the header for a new file.

    The uniqueness key is checked against what the file already holds.
    """
    path = Path(path)
    existing = MetricReport.read(path)
    rows = list(rows)
    for r in rows:
        if r.key in existing:
            raise ValueError(f"{path}: duplicate metric row {r.key}")
        existing.add(r)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(COLUMNS)
        for r in rows:
            w.writerow(r.to_record())

