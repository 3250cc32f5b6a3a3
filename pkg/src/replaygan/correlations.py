"""Static Kendall tau-b matrices and per-patient trend/cycle correlations."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .schema import Cohort


@dataclass
class TauMatrix:
    matrix: np.ndarray
    flat: list[int] = field(default_factory=list)  # zero-variance columns


def kendall_tau_matrix(rows: np.ndarray) -> TauMatrix:
    """Pairwise tau-b between the columns of ``rows`` [n, V]; zero-variance columns get 0 off-diagonal."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError("kendall_tau_matrix needs a 2-d array with at least 2 rows")
    V = rows.shape[1]
    flat = [j for j in range(V) if np.ptp(rows[:, j]) == 0]
    out = np.eye(V)
    for i in range(V):
        if i in flat:
            continue
        for j in range(i):
            if j in flat:
                continue
            tau = stats.kendalltau(rows[:, i], rows[:, j], variant="b").statistic
            out[i, j] = out[j, i] = tau
    return TauMatrix(out, flat)


def detrend(series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``series`` (time along axis 0) into an OLS straight-line trend and its residual cycle."""
    y = np.asarray(series, dtype=float)
    T = y.shape[0]
    if T < 3:
        raise ValueError("detrend needs at least 3 time points")
    t = np.arange(T, dtype=float)
    tc = t - t.mean()
    ym = y.mean(axis=0)
    slope = np.tensordot(tc, y - ym, axes=(0, 0)) / (tc @ tc)
    trend = ym + np.multiply.outer(tc, slope)
    cycle = y - trend
    const = np.ptp(y, axis=0) == 0
    if np.any(const):
        # exact zero cycle for constant series
        trend = np.where(const, y, trend)
        cycle = np.where(const, 0.0, cycle)
    return trend, cycle


def ols_line(series) -> tuple[float, float]:
    """(slope, intercept) of the least-squares line through (t, series[t-1]) for t = 1..m."""
    y = np.asarray(series, dtype=float)
    t = np.arange(1, len(y) + 1, dtype=float)
    slope = ((t - t.mean()) @ (y - y.mean())) / ((t - t.mean()) @ (t - t.mean()))
    return float(slope), float(y.mean() - slope * t.mean())


def dynamic_correlation(cohort: Cohort, mode: str = "trend") -> tuple[np.ndarray, np.ndarray]:
    """Kendall tau-b of the chosen component per patient, averaged over the patients where it is defined.

    Returns (matrix, per-entry patient counts).
    """
    if mode not in ("trend", "cycle"):
        raise ValueError(f"mode must be 'trend' or 'cycle', got {mode!r}")
    V = len(cohort.schema)
    total = np.zeros((V, V))
    count = np.zeros((V, V), dtype=np.int64)
    for rec in cohort:
        trend, cycle = detrend(rec.values)
        comp = trend if mode == "trend" else cycle
        live = np.ptp(comp, axis=0) > 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for i in range(V):
                if not live[i]:
                    continue
                for j in range(i):
                    if not live[j]:
                        continue
                    tau = stats.kendalltau(comp[:, i], comp[:, j], variant="b").statistic
                    if np.isfinite(tau):
                        total[i, j] += tau
                        count[i, j] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        mat = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    mat = mat + mat.T + np.eye(V)
    count = count + count.T + np.diag(np.full(V, len(cohort)))
    return mat, count


@dataclass
class CorrelationReport:
    variables: list[str]
    static: np.ndarray
    trend: np.ndarray
    cycle: np.ndarray
    trend_counts: np.ndarray
    cycle_counts: np.ndarray
    flat: list[str] = field(default_factory=list)


def correlation_report(cohort: Cohort) -> CorrelationReport:
    tau = kendall_tau_matrix(cohort.rows())
    trend, tc = dynamic_correlation(cohort, "trend")
    cycle, cc = dynamic_correlation(cohort, "cycle")
    names = cohort.schema.names
    return CorrelationReport(names, tau.matrix, trend, cycle, tc, cc, [names[j] for j in tau.flat])
