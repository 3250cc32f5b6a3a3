import numpy as np
import pytest

from oracles import tau_b_bruteforce
from replaygan.correlations import correlation_report, detrend, dynamic_correlation, kendall_tau_matrix, ols_line
from replaygan.schema import Cohort, PatientRecord


def test_tau_trivial():
    m = kendall_tau_matrix(np.array([[1, 1, 3], [2, 2, 2], [3, 3, 1]])).matrix
    assert m[0, 1] == pytest.approx(1.0) and m[0, 2] == pytest.approx(-1.0)


def test_tau_flat_column():
    t = kendall_tau_matrix(np.array([[1, 5], [2, 5], [3, 5]]))
    assert t.flat == [1] and t.matrix[0, 1] == 0 and t.matrix[1, 1] == 1


@pytest.mark.parametrize("seed", range(12))
def test_tau_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 50))
    rows = np.c_[rng.integers(0, 3, n), rng.normal(size=n), rng.integers(0, 2, n), rng.integers(0, 6, n)]
    m = kendall_tau_matrix(rows).matrix
    for i in range(4):
        for j in range(4):
            if i != j and np.ptp(rows[:, i]) > 0 and np.ptp(rows[:, j]) > 0:
                assert abs(m[i, j] - tau_b_bruteforce(rows[:, i].tolist(), rows[:, j].tolist())) <= 1e-10
    np.testing.assert_array_equal(m, m.T)
    assert np.all(np.diag(m) == 1) and np.all(np.abs(m) <= 1 + 1e-12)


def test_tau_five_row_mixed_example():
    rows = np.array([[0, 1.5], [1, 0.2], [1, 3.1], [2, 2.2], [0, 0.9]])
    m = kendall_tau_matrix(rows).matrix
    assert abs(m[0, 1] - tau_b_bruteforce(rows[:, 0].tolist(), rows[:, 1].tolist())) <= 1e-12


def test_detrend_examples():
    tr, cy = detrend(np.array([1.0, 2, 3, 4]))
    np.testing.assert_allclose(cy, 0, atol=1e-12)
    y = np.array([0.0, 1, 0, 1])
    tr, cy = detrend(y)
    np.testing.assert_allclose(tr + cy, y, atol=1e-12)
    slope, icpt = ols_line([2, 4, 5, 4, 5])
    assert slope == pytest.approx(0.6) and icpt == pytest.approx(2.2)
    tr, cy = detrend(np.array([2.0, 4, 5, 4, 5]))
    np.testing.assert_allclose(tr, [2.8, 3.4, 4.0, 4.6, 5.2], atol=1e-12)
    np.testing.assert_allclose(cy, [-0.8, 0.6, 1.0, -0.6, -0.2], atol=1e-12)
    tr, cy = detrend(np.full(5, 3.0))
    assert np.all(cy == 0) and np.all(tr == 3.0)
    with pytest.raises(ValueError):
        detrend(np.array([1.0, 2.0]))


def test_detrend_reconstructs(rng):
    y = rng.normal(size=(17, 5))
    tr, cy = detrend(y)
    assert np.max(np.abs(tr + cy - y)) <= 1e-10


def test_identical_patients(small_cohort):
    rec = small_cohort.records[3]
    one = Cohort(small_cohort.schema, [rec])
    many = Cohort(small_cohort.schema, [rec] * 5)
    for mode in ("trend", "cycle"):
        np.testing.assert_allclose(dynamic_correlation(many, mode)[0], dynamic_correlation(one, mode)[0])


def test_exclusion_gives_negative_static_tau(cohort500):
    s = cohort500.schema
    rows = cohort500.rows()
    nnrti_applied = (rows[:, s.index("Comp. NNRTI")] != s["Comp. NNRTI"].level_index("Not Applied")).astype(float)
    ini_applied = (rows[:, s.index("Comp. INI")] != s["Comp. INI"].level_index("Not Applied")).astype(float)
    m = kendall_tau_matrix(np.c_[nnrti_applied, ini_applied]).matrix
    assert m[0, 1] < -0.2


def test_trend_null_is_small(schema):
    rng = np.random.default_rng(0)
    recs = [PatientRecord(f"p{i}", np.c_[rng.normal(size=(20, 3)) + 10, np.zeros((20, len(schema) - 3))])
            for i in range(500)]
    m, counts = dynamic_correlation(Cohort(schema, recs), "trend")
    assert np.all(np.abs(m[:3, :3][~np.eye(3, dtype=bool)]) < 0.1)


def test_report_shapes(small_cohort):
    rep = correlation_report(small_cohort)
    for mat in (rep.static, rep.trend, rep.cycle):
        assert mat.shape == (13, 13)
        np.testing.assert_allclose(mat, mat.T)
        assert np.all(np.diag(mat) == 1)
