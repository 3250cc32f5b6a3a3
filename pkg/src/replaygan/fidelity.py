"""Diversity and fidelity metrics: log-cluster U, category coverage and the per-variable test table."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.cluster import KMeans

from .schema import Cohort, ScalingParams, VariableSchema, encode_records

ALPHA = 0.05
FLOOR = 1e-12


# ---------------------------------------------------------------------------
# log-cluster


@dataclass
class ClusterStats:
    gamma: int
    repeats: int
    sample_n: int
    U: np.ndarray  # one value per repeat
    n_real: np.ndarray  # [repeats, gamma]
    n_syn: np.ndarray  # [repeats, gamma]
    empty_clusters: int = 0  # clusters with n_k = 0, excluded from the average

    @property
    def n(self) -> np.ndarray:
        return self.n_real + self.n_syn

    @property
    def mean(self) -> float:
        return float(np.mean(self.U))

    @property
    def std(self) -> float:
        return float(np.std(self.U))

    def __str__(self) -> str:
        return f"{self.mean:.3f} ± {self.std:.3f}"


def encode_rows(cohort: Cohort, scaling: ScalingParams) -> np.ndarray:
    """One encoded row per (record, month): scaled numerics and one-hot blocks."""
    if not len(cohort):
        return np.zeros((0, cohort.schema.encoded_width))
    return np.concatenate([encode_records(r.values, cohort.schema, scaling) for r in cohort])


def cluster_divergence(n_real: np.ndarray, n_syn: np.ndarray, share: float) -> tuple[float, int]:
    """log of the mean over nonempty clusters of max((n_real/n - share)^2, 1e-12)."""
    n = n_real + n_syn
    live = n > 0
    terms = np.maximum((n_real[live] / n[live] - share) ** 2, FLOOR)
    return float(np.log(terms.mean())), int((~live).sum())


def log_cluster(real: Cohort, syn: Cohort, gamma: int = 20, repeats: int = 20, sample_n: int = 100_000,
                seed: int = 0, scaling: ScalingParams | None = None) -> ClusterStats:
    """Cluster-wise divergence between row samples of two cohorts (lower is better mixed).

    Each repeat draws ``sample_n`` rows with replacement from each cohort,
    clusters the merged rows with k-means and compares every cluster's real
    fraction with the overall real share.
    """
    if not len(real) or not len(syn):
        raise ValueError("log_cluster needs two nonempty cohorts")
    scaling = scaling or ScalingParams.fit(real)
    xr, xs = encode_rows(real, scaling), encode_rows(syn, scaling)
    share = 0.5  # equal draws from each side
    Us, nr_all, ns_all, empty = [], [], [], 0
    for seq in np.random.SeedSequence(seed).spawn(repeats):
        # one stream per repeat drives both draws so swapping the cohorts swaps the labels only
        s_draw, s_init, s_km = seq.spawn(3)
        ir = np.random.default_rng(s_draw).integers(len(xr), size=sample_n)
        is_ = np.random.default_rng(s_draw).integers(len(xs), size=sample_n)
        x = np.concatenate([xr[ir], xs[is_]])
        lab = np.r_[np.zeros(sample_n, bool), np.ones(sample_n, bool)]
        order = np.lexsort(np.c_[x, lab].T[::-1])
        x, lab = x[order], lab[order]
        # ties between identical rows are broken by label, which stays symmetric in the counts below
        k = min(gamma, len(np.unique(x, axis=0)))
        init = x[np.random.default_rng(s_init).choice(len(x), k, replace=False)]
        if len(np.unique(init, axis=0)) < k:
            uniq = np.unique(x, axis=0)
            init = uniq[np.random.default_rng(s_init).choice(len(uniq), k, replace=False)]
        km = KMeans(k, init=init, n_init=1, max_iter=300, tol=1e-4,
                    random_state=int(s_km.generate_state(1)[0])).fit(x)
        n_real = np.bincount(km.labels_[~lab], minlength=gamma)
        n_syn = np.bincount(km.labels_[lab], minlength=gamma)
        u, e = cluster_divergence(n_real, n_syn, share)
        Us.append(u)
        nr_all.append(n_real)
        ns_all.append(n_syn)
        empty += e
    return ClusterStats(gamma, repeats, sample_n, np.array(Us), np.array(nr_all), np.array(ns_all), empty)


# ---------------------------------------------------------------------------
# category coverage


@dataclass
class Coverage:
    cat: float
    per_variable: dict[str, float]
    excluded: list[str] = field(default_factory=list)


def coverage_detail(real: Cohort, syn: Cohort) -> Coverage:
    if real.schema.hash() != syn.schema.hash():
        raise ValueError("cohorts must share a schema")
    per, excluded = {}, []
    rr, rs = real.rows(), syn.rows()
    for v in real.schema.nonnumeric:
        j = real.schema.index(v.name)
        lr = set(np.unique(rr[:, j]).tolist())
        if not lr:
            excluded.append(v.name)
            continue
        ls = set(np.unique(rs[:, j]).tolist())
        per[v.name] = min(1.0, len(ls) / len(lr))
    cat = float(np.mean(list(per.values()))) if per else float("nan")
    return Coverage(cat, per, excluded)


def category_coverage(real: Cohort, syn: Cohort) -> float:
    """Mean over non-numeric variables of min(1, levels present in syn / levels present in real)."""
    return coverage_detail(real, syn).cat


# ---------------------------------------------------------------------------
# statistical test table

TESTS = ("KS", "t", "F", "3sigma")


@dataclass
class TestTable:
    variables: list[str]
    counts: dict[str, dict[str, int]]  # test -> variable -> passes
    iters: int = 100
    batch: int = 32
    alpha: float = ALPHA

    __test__ = False  # not a pytest class

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({t: [self.counts[t].get(v, np.nan) for v in self.variables] for t in TESTS},
                          index=pd.Index(self.variables, name="variable"))
        return df.astype("Int64")

    def min_count(self, test: str) -> int:
        return min(self.counts[test].values())


def _passes(p: float, a: np.ndarray, b: np.ndarray, alpha: float) -> bool:
    if np.isnan(p):
        # undefined statistic: only two identical constant samples count as agreement
        return bool(np.ptp(a) == 0 and np.ptp(b) == 0 and a[0] == b[0])
    return bool(p >= alpha)


def f_test(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided Snedecor F test p-value for equal variances."""
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    if va == 0 and vb == 0:
        return float("nan")
    if va == 0 or vb == 0:
        return 0.0
    f = va / vb
    d1, d2 = len(a) - 1, len(b) - 1
    return float(min(1.0, 2 * min(stats.f.cdf(f, d1, d2), stats.f.sf(f, d1, d2))))


def anova_f(a: np.ndarray, b: np.ndarray) -> float:
    """One-way ANOVA F p-value on level indices, real batch vs synthetic batch."""
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return float("nan")
    return float(stats.f_oneway(a, b).pvalue)


def _test_values(cohort: Cohort) -> np.ndarray:
    """Rows on the modelled scale: transformed numerics, level indices for the rest."""
    rows = cohort.rows().copy()
    for j, v in enumerate(cohort.schema.variables):
        if v.is_numeric:
            if v.transform == "log":
                rows[:, j] = np.log(rows[:, j])
            elif v.transform == "log1p":
                rows[:, j] = np.log1p(rows[:, j])
    return rows


def run_test_table(real: Cohort, syn: Cohort, iters: int = 100, batch: int = 32, seed: int = 0,
                   alpha: float = ALPHA) -> TestTable:
    """Per-variable pass counts of two-sample tests over ``iters`` random row batches."""
    schema: VariableSchema = real.schema
    if schema.hash() != syn.schema.hash():
        raise ValueError("cohorts must share a schema")
    xr, xs = _test_values(real), _test_values(syn)
    names = schema.names
    counts = {t: {} for t in TESTS}
    for v in schema.variables:
        for t in ("KS", "F"):
            counts[t][v.name] = 0
        if v.is_numeric:
            counts["t"][v.name] = 0
            counts["3sigma"][v.name] = 0
    rng = np.random.default_rng(seed)
    for _ in range(iters):
        ir = rng.choice(len(xr), min(batch, len(xr)), replace=False)
        is_ = rng.choice(len(xs), min(batch, len(xs)), replace=False)
        for j, v in enumerate(schema.variables):
            a, b = xr[ir, j], xs[is_, j]
            name = names[j]
            counts["KS"][name] += _passes(stats.ks_2samp(a, b).pvalue, a, b, alpha)
            if v.is_numeric:
                with np.errstate(all="ignore"):
                    pt = stats.ttest_ind(a, b).pvalue
                counts["t"][name] += _passes(float(pt), a, b, alpha)
                counts["F"][name] += _passes(f_test(a, b), a, b, alpha)
                m, s = a.mean(), a.std(ddof=1)
                counts["3sigma"][name] += bool(m - 2 * s <= b.mean() <= m + 2 * s)
            else:
                counts["F"][name] += _passes(anova_f(a, b), a, b, alpha)
    return TestTable(names, counts, iters, batch, alpha)
