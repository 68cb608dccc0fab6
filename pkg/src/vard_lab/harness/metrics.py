"""Sample-set distances and metric rows."""

from __future__ import annotations

import csv
import io
import math

import numpy as np

from ..errors import ContractError, DimensionError


def random_directions(n, dim, rng):
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def wasserstein_1d(u, v):
    """W1 between two empirical 1-D distributions via their quantile functions."""
    u, v = np.sort(u), np.sort(v)
    if u.size == v.size:
        return float(np.mean(np.abs(u - v)))
    grid = np.union1d(np.arange(1, u.size + 1) / u.size, np.arange(1, v.size + 1) / v.size)
    widths = np.diff(np.concatenate([[0.0], grid]))
    qu = u[np.minimum(np.ceil(grid * u.size - 1e-12).astype(int) - 1, u.size - 1)]
    qv = v[np.minimum(np.ceil(grid * v.size - 1e-12).astype(int) - 1, v.size - 1)]
    return float(np.sum(widths * np.abs(qu - qv)))


def sliced_wasserstein(a, b, n_projections=64, rng=None, directions=None):
    """Mean 1-D Wasserstein-1 distance over random unit projections."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"point sets have dimensions {a.shape[1]} and {b.shape[1]}")
    if len(a) == 0 or len(b) == 0:
        raise ContractError("point sets must be non-empty")
    if directions is None:
        rng = np.random.default_rng(rng)
        directions = random_directions(n_projections, a.shape[1], rng)
    pa, pb = a @ directions.T, b @ directions.T
    return float(np.mean([wasserstein_1d(pa[:, k], pb[:, k]) for k in range(len(directions))]))


class MetricsWriter:
    """Accumulates rows with a frozen column set; renders CSV with LF endings."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows = []

    def add(self, **row):
        if set(row) != set(self.columns):
            raise ContractError(f"row keys {sorted(row)} != columns {self.columns}")
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ContractError("metric steps must increase")
        for k, v in row.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise ContractError(f"refusing to write non-finite {k}")
        self.rows.append(row)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
