"""Distributional and property metrics with self-contained ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import DataError, StructuralError
from .io import append_csv

REPORT_HEADER = ("metric", "value", "n_a", "n_b", "seed", "config_hash")


def _w2_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W2 between two 1-d empirical measures (any sizes), via their quantile functions."""
    a = np.sort(a)
    b = np.sort(b)
    if len(a) == len(b):
        return float(np.sqrt(np.mean((a - b) ** 2)))
    levels = np.union1d(np.arange(1, len(a) + 1) / len(a), np.arange(1, len(b) + 1) / len(b))
    widths = np.diff(np.concatenate([[0.0], levels]))
    mid = levels - 0.5 * widths
    qa = a[np.minimum((mid * len(a)).astype(np.int64), len(a) - 1)]
    qb = b[np.minimum((mid * len(b)).astype(np.int64), len(b) - 1)]
    return float(np.sqrt(np.sum(widths * (qa - qb) ** 2)))


def _frame(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal axes of the two sets, built so that the result does not depend on argument order.

    A joint orthogonal map rotates the axes with the data. Each axis' sign
    is fixed by the sign of the third central moment along it, which rotates
    with the data too.
    """
    m = 0.5 * (a.mean(axis=0) + b.mean(axis=0))
    ca, cb = a - m, b - m
    _, vecs = np.linalg.eigh(ca.T @ ca + cb.T @ cb)
    skew = np.sum((ca @ vecs) ** 3, axis=0) + np.sum((cb @ vecs) ** 3, axis=0)
    return vecs * np.where(skew < 0, -1.0, 1.0)


def sliced_w2(a, b, n_projections: int = 64, rng: Optional[np.random.Generator] = None) -> float:
    """Mean over random unit directions of the exact 1-d W2 between projected samples.

    Directions are drawn uniformly on the sphere and expressed in the
    principal-axis frame of the two sets. The directions stay uniform, so the
    estimator is unchanged in law, and it becomes invariant to a joint
    orthogonal transform of both sets.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise DataError("sliced_w2 needs non-empty sample sets")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise StructuralError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if n_projections < 1:
        raise DataError("n_projections must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    d = a.shape[1]
    dirs = rng.normal(size=(n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if d > 1 and len(a) + len(b) > 1:
        dirs = dirs @ _frame(a, b).T
    return float(np.mean([_w2_1d(a @ u, b @ u) for u in dirs]))


def marginal_tv(categories, target_marginals) -> tuple[np.ndarray, float]:
    """Per-dimension total variation between empirical and target marginals, and its max."""
    cats = np.asarray(categories)
    target = np.asarray(target_marginals, dtype=np.float64)
    if target.ndim != 2:
        raise StructuralError("target marginals must be a (D, K) table")
    cats = cats.reshape(len(cats), -1)
    if cats.shape[1] != target.shape[0]:
        raise StructuralError(f"{cats.shape[1]} sample dims vs {target.shape[0]} target dims")
    if len(cats) == 0:
        raise DataError("no samples")
    k = target.shape[1]
    if np.any(cats < 0) or np.any(cats >= k) or np.any(cats != np.round(cats)):
        raise StructuralError(f"categories must be integers in [0, {k})")
    emp = np.stack([np.bincount(cats[:, j].astype(np.int64), minlength=k) for j in range(cats.shape[1])]) / len(cats)
    tv = 0.5 * np.abs(emp - target).sum(axis=1)
    return tv, float(tv.max())


def property_mae(samples, f: Callable, y_target) -> float:
    """Mean absolute deviation of ``f(sample)`` from the target."""
    vals = np.asarray(f(np.asarray(samples, dtype=np.float64)), dtype=np.float64).reshape(-1)
    return float(np.mean(np.abs(vals - np.asarray(y_target, dtype=np.float64))))


def validity_rate(samples, dataset) -> float:
    """Fraction of samples passing the dataset's construction rules."""
    return float(np.mean(dataset.is_valid(samples)))


def duplicate_fraction(categories) -> float:
    cats = np.asarray(categories).reshape(len(categories), -1)
    return 1.0 - len(np.unique(cats, axis=0)) / len(cats)


@dataclass
class MetricReport:
    metric: str
    value: float
    n_a: int
    n_b: int = 0
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise DataError(f"metric {self.metric} is not finite")

    def row(self) -> list:
        return [self.metric, float(self.value), self.n_a, self.n_b, self.seed, self.config_hash]


def append_reports(path, reports) -> None:
    append_csv(Path(path), REPORT_HEADER, [r.row() for r in reports])
