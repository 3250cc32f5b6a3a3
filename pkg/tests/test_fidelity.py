import numpy as np
import pytest

from oracles import cat_bruteforce
from replaygan.fidelity import (
    category_coverage, cluster_divergence, coverage_detail, f_test, log_cluster, run_test_table,
)
from replaygan.schema import Cohort, PatientRecord


def _random_cohort(schema, rng, n_records, length=10, drop=None):
    recs = []
    for i in range(n_records):
        v = np.zeros((length, len(schema)))
        for j, var in enumerate(schema.variables):
            if var.is_numeric:
                v[:, j] = rng.lognormal(3, 1, length)
            else:
                k = len(var.levels) if drop is None or var.name not in drop else 1
                v[:, j] = rng.integers(0, k) if var.static else rng.integers(0, k, length)
        recs.append(PatientRecord(f"r{i}", v))
    return Cohort(schema, recs)


def test_cat_self_is_one(cohort500):
    assert category_coverage(cohort500, cohort500) == 1.0


def test_cat_hand_example(tiny_schema):
    # variable b: syn covers 1 of 2 levels, c: 3 of 3 levels
    real = Cohort(tiny_schema, [PatientRecord("a", [[1, 0, 0], [1, 1, 1], [1, 0, 2]])])
    syn = Cohort(tiny_schema, [PatientRecord("s", [[1, 0, 0], [1, 0, 1], [1, 0, 2]])])
    assert category_coverage(real, syn) == pytest.approx((1 / 2 + 1) / 2)


def test_cat_single_level_contributes_one(tiny_schema):
    real = Cohort(tiny_schema, [PatientRecord("a", [[1, 0, 0]] * 3)])
    assert coverage_detail(real, real).per_variable["b"] == 1.0


def test_cat_monotone_under_dropped_level(schema, rng):
    real = _random_cohort(schema, rng, 40)
    full = category_coverage(real, real)
    collapsed = _random_cohort(schema, rng, 40, drop={"Extra PI"})
    assert category_coverage(real, collapsed) < full


@pytest.mark.parametrize("seed", range(10))
def test_cat_matches_bruteforce(schema, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 100))
    real = _random_cohort(schema, rng, n, length=10)
    syn = _random_cohort(schema, rng, int(rng.integers(1, 100)), length=10,
                         drop=set(rng.choice(schema.names, 3).tolist()))
    cols = [schema.index(v.name) for v in schema.nonnumeric]
    expect = cat_bruteforce(real.rows().tolist(), syn.rows().tolist(), cols)
    assert abs(category_coverage(real, syn) - expect) <= 1e-10


def test_cluster_divergence_formula():
    u, empty = cluster_divergence(np.array([5, 0, 3]), np.array([5, 0, 1]), 0.5)
    assert empty == 1
    assert u == pytest.approx(np.log((1e-12 + 0.25 ** 2) / 2))


def _resample(cohort, seed):
    rng = np.random.default_rng(seed)
    return cohort.subset(rng.integers(0, len(cohort), len(cohort)).tolist())


def test_log_cluster_resample_beats_collapse(small_cohort):
    r0 = small_cohort.records[0]
    collapsed = Cohort(small_cohort.schema, [PatientRecord(f"c{i}", np.repeat(r0.values[:1], r0.length, 0))
                                             for i in range(len(small_cohort))])
    wins = 0
    for s in range(20):
        good = log_cluster(small_cohort, _resample(small_cohort, s), repeats=1, sample_n=2000, seed=s)
        bad = log_cluster(small_cohort, collapsed, repeats=1, sample_n=2000, seed=s)
        wins += good.mean < bad.mean
    assert wins == 20


def test_log_cluster_identical_is_strongly_negative(small_cohort):
    res = log_cluster(small_cohort, small_cohort, repeats=3, sample_n=2000)
    assert res.mean <= np.log(1e-3)
    assert np.all(res.n == res.n_real + res.n_syn)
    assert np.all(res.n.sum(1) == 4000)


def test_log_cluster_symmetric_at_equal_sizes(schema, rng):
    a = _random_cohort(schema, rng, 30)
    b = _random_cohort(schema, rng, 30)
    from replaygan.schema import ScalingParams
    sc = ScalingParams.fit(a)
    ab = log_cluster(a, b, repeats=3, sample_n=1500, seed=2, scaling=sc)
    ba = log_cluster(b, a, repeats=3, sample_n=1500, seed=2, scaling=sc)
    np.testing.assert_allclose(ab.U, ba.U, rtol=0, atol=1e-12)


def test_f_test_p_values():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 30), rng.normal(0, 1, 40)
    from scipy import stats
    f = np.var(a, ddof=1) / np.var(b, ddof=1)
    p = 2 * min(stats.f.cdf(f, 29, 39), stats.f.sf(f, 29, 39))
    assert f_test(a, b) == pytest.approx(p)
    assert f_test(np.ones(5), np.ones(5)) != f_test(np.ones(5), np.ones(5))  # nan
    assert f_test(np.ones(5), np.arange(5.0)) == 0.0


def test_test_table_shift_power(cohort500):
    recs = []
    s = cohort500.schema
    j = s.index("VL")
    sd = np.log1p(cohort500.column("VL")).std()
    for r in cohort500:
        v = r.values.copy()
        v[:, j] = np.expm1(np.log1p(v[:, j]) + 10 * sd)
        recs.append(PatientRecord(r.patient_id, v))
    shifted = Cohort(s, recs)
    tt = run_test_table(cohort500, shifted, seed=0)
    assert tt.counts["t"]["VL"] <= 5
    assert tt.counts["3sigma"]["VL"] <= 5


def test_test_table_layout_and_reproducible(small_cohort):
    a = run_test_table(small_cohort, small_cohort, iters=10, seed=4)
    b = run_test_table(small_cohort, small_cohort, iters=10, seed=4)
    assert a.counts == b.counts
    df = a.to_frame()
    assert list(df.columns) == ["KS", "t", "F", "3sigma"]
    assert df.loc["Gender", "t"] is pd_na() and df.loc["VL", "t"] <= 10
    for t in a.counts:
        assert all(0 <= c <= 10 for c in a.counts[t].values())


def pd_na():
    import pandas as pd
    return pd.NA
