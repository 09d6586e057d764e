"""Columnar text I/O for per-source data.

One CSV per data source, one row per outcome coordinate:

    pid,y,x0,x1,...,x{p-1}

Rows of a participant appear consecutively; their file order is the
coordinate order.  Participants may contribute different numbers of rows.
Floats are written with up to 17 significant digits so a write/read cycle
reproduces the exact binary values.
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import ConfigError
from .source import SourceData


def write_source_csv(path, data: SourceData) -> None:
    """Write one source's participants as pid,y,x0..x{p-1} rows."""
    rows_by_pid = {}
    for idx, y, X in data._buckets:
        for pos, i in enumerate(idx):
            rows_by_pid[int(i)] = (y[pos], X[pos])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pid", "y"] + [f"x{c}" for c in range(data.p)])
        for i in sorted(rows_by_pid):
            y, X = rows_by_pid[i]
            for r in range(y.shape[0]):
                writer.writerow([i, f"{y[r]:.17g}"] + [f"{v:.17g}" for v in X[r]])


def read_source_csv(path, link: str, basis: str, dispersion: float | None = None) -> SourceData:
    """Load one source CSV; ``link`` and ``basis`` come from the job config."""
    ys: dict = {}
    Xs: dict = {}
    order: list = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "pid" or header[1] != "y":
            raise ConfigError(f"{path}: expected header pid,y,x0,...")
        p = len(header) - 2
        if p < 1:
            raise ConfigError(f"{path}: no covariate columns")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 2:
                raise ConfigError(f"{path}:{ln}: expected {p + 2} fields, got {len(row)}")
            pid = row[0]
            if pid not in ys:
                ys[pid] = []
                Xs[pid] = []
                order.append(pid)
            ys[pid].append(float(row[1]))
            Xs[pid].append([float(v) for v in row[2:]])
    if not order:
        raise ConfigError(f"{path}: no data rows")
    y = [np.asarray(ys[pid]) for pid in order]
    X = [np.asarray(Xs[pid]) for pid in order]
    return SourceData(y=y, X=X, link=link, basis=basis, dispersion=dispersion)
