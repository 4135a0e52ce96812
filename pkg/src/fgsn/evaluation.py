"""Cluster-quality and localization metrics."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))


@dataclass(frozen=True)
class AssignmentPair:
    x: np.ndarray  # cluster labels
    y: np.ndarray  # semantic labels

    def __post_init__(self):
        x = np.asarray(self.x).reshape(-1)
        y = np.asarray(self.y).reshape(-1)
        if len(x) != len(y):
            raise ValueError(f"assignment lengths differ ({len(x)} vs {len(y)})")
        if len(x) < 1:
            raise ValueError("assignments must be non-empty")
        object.__setattr__(self, "x", x.astype(np.int64))
        object.__setattr__(self, "y", y.astype(np.int64))


@dataclass(frozen=True)
class RecallThresholds:
    pairs: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        pairs = tuple((float(m), float(d)) for m, d in self.pairs)
        for (m0, d0), (m1, d1) in zip(pairs, pairs[1:]):
            if not (m1 > m0 and d1 > d0):
                raise ValueError("thresholds must increase strictly in both meters and degrees")
        object.__setattr__(self, "pairs", pairs)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi_from_table(table: np.ndarray) -> float:
    """NMI ``I(X;Y) / sqrt(H(X) H(Y))`` from a joint count table (natural log)."""
    table = np.asarray(table, dtype=np.float64)
    n = table.sum()
    hx = _entropy(table.sum(axis=0))
    hy = _entropy(table.sum(axis=1))
    if hx == 0 or hy == 0:
        return 0.0
    nz = table > 0
    pxy = table[nz] / n
    outer = np.outer(table.sum(axis=1) / n, table.sum(axis=0) / n)[nz]
    mi = float((pxy * np.log(pxy / outer)).sum())
    return float(min(1.0, max(0.0, mi / np.sqrt(hx * hy))))


def nmi(pair: AssignmentPair) -> float:
    """Normalised mutual information between cluster and semantic labels.

    Returns 0 when either assignment is constant.

    >>> nmi(AssignmentPair([0, 0, 1, 1], [1, 1, 0, 0]))
    1.0
    """
    _, xi = np.unique(pair.x, return_inverse=True)
    _, yi = np.unique(pair.y, return_inverse=True)
    table = np.zeros((yi.max() + 1, xi.max() + 1))
    np.add.at(table, (yi, xi), 1)
    return nmi_from_table(table)


def contingency(pair: AssignmentPair, rows: int, cols: int) -> np.ndarray:
    """Count table with ``cell[t, c]`` = elements having ``y == t`` and ``x == c``.

    Rows index semantic classes and columns cluster indices, so the table
    reads like a confusion matrix with true classes down the side.
    """
    if pair.y.min() < 0 or pair.y.max() >= rows:
        raise ValueError(f"semantic label outside [0, {rows})")
    if pair.x.min() < 0 or pair.x.max() >= cols:
        raise ValueError(f"cluster label outside [0, {cols})")
    table = np.zeros((rows, cols), dtype=np.int64)
    np.add.at(table, (pair.y, pair.x), 1)
    return table


def recall_table(results: Sequence[tuple[float, float]], thresholds: RecallThresholds = RecallThresholds()) -> list[float]:
    """Percentage of results within each ``(meters, degrees)`` pair (inclusive).

    Failed localizations should be passed as ``(inf, inf)``.
    """
    errs = np.asarray(results, dtype=np.float64).reshape(-1, 2)
    if len(errs) == 0:
        raise ValueError("no results to evaluate")
    errs = np.nan_to_num(errs, nan=np.inf)
    return [100.0 * float(np.mean((errs[:, 0] <= m) & (errs[:, 1] <= d))) for m, d in thresholds.pairs]


def format_recall(values: Sequence[float]) -> str:
    return " / ".join(f"{v:.1f}" for v in values)


def recall_text_table(rows: dict, thresholds: RecallThresholds = RecallThresholds()) -> str:
    """Plain-text table with one ``a / b / c`` triplet per method row."""
    m_head = " / ".join(f"{m:g}" for m, _ in thresholds.pairs) + " [m]"
    d_head = " / ".join(f"{d:g}" for _, d in thresholds.pairs) + " [deg]"
    name_w = max([len("method")] + [len(k) for k in rows])
    cells = {k: format_recall(v) for k, v in rows.items()}
    col_w = max([len(m_head), len(d_head)] + [len(c) for c in cells.values()])
    lines = [f"{'method':<{name_w}} | {m_head:^{col_w}}", f"{'':<{name_w}} | {d_head:^{col_w}}", "-" * (name_w + 3 + col_w)]
    lines += [f"{k:<{name_w}} | {c:^{col_w}}" for k, c in cells.items()]
    return "\n".join(lines) + "\n"


def recall_csv(rows: dict, thresholds: RecallThresholds = RecallThresholds()) -> str:
    buf = io.StringIO()
    buf.write("method," + ",".join(f"recall_{m:g}m_{d:g}deg" for m, d in thresholds.pairs) + "\n")
    for k, v in rows.items():
        buf.write(k + "," + ",".join(f"{x:.4f}" for x in v) + "\n")
    return buf.getvalue()


def inlier_cdf(values: Iterable[float]) -> list[tuple[float, float]]:
    """Empirical CDF as sorted ``(value, fraction <= value)`` steps."""
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    if len(v) == 0:
        raise ValueError("no values")
    uniq, counts = np.unique(v, return_counts=True)
    frac = np.cumsum(counts) / len(v)
    return [(float(a), float(b)) for a, b in zip(uniq, frac)]


def cdf_csv(curves: dict) -> str:
    """Long-format CSV: ``series,value,cumulative_fraction``."""
    lines = ["series,value,cumulative_fraction"]
    for name, curve in curves.items():
        lines += [f"{name},{v!r},{f!r}" for v, f in curve]
    return "\n".join(lines) + "\n"
