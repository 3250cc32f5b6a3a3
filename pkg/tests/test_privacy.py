import numpy as np
import pytest

from oracles import risk_bruteforce
from replaygan.privacy import (
    RISK_THRESHOLD, disclosure_risk, min_euclidean_distance, patient_classes, privacy_audit, record_distances,
)
from replaygan.schema import Cohort, PatientRecord


def _demo(schema, gender, ethnic, pid, length=10):
    v = np.zeros((length, len(schema)))
    v[:, schema.index("Gender")] = gender
    v[:, schema.index("Ethnic")] = ethnic
    v[:, :3] = 100.0
    return PatientRecord(pid, v)


def test_hand_example_half(schema):
    real = Cohort(schema, [_demo(schema, 0, 0, "r1"), _demo(schema, 0, 0, "r2")])
    syn = Cohort(schema, [_demo(schema, 0, 0, "s1"), _demo(schema, 0, 0, "s2")])
    res = disclosure_risk(real, syn)
    assert res.risk == 0.5
    assert res.equivalence_class_table[("Male", "Asian")] == (2, True)


def test_absent_classes_zero(schema):
    real = Cohort(schema, [_demo(schema, 0, 0, "r1")])
    syn = Cohort(schema, [_demo(schema, 1, 2, "s1")])
    assert disclosure_risk(real, syn).risk == 0.0


def test_singletons_give_one(schema):
    real = Cohort(schema, [_demo(schema, g, e, f"r{g}{e}") for g in range(2) for e in range(4)])
    syn = Cohort(schema, [_demo(schema, 1, 3, "s")])
    assert disclosure_risk(real, syn).risk == 1.0


def test_varying_quasi_identifier_rejected(schema):
    r = _demo(schema, 0, 0, "r1")
    r.values[5, schema.index("Ethnic")] = 1
    with pytest.raises(ValueError, match="vary"):
        disclosure_risk(Cohort(schema, [r]), Cohort(schema, [r]))


@pytest.mark.parametrize("seed", range(10))
def test_risk_matches_bruteforce(schema, seed):
    rng = np.random.default_rng(seed)
    nr, ns = int(rng.integers(1, 100)), int(rng.integers(1, 100))
    real = Cohort(schema, [_demo(schema, rng.integers(2), rng.integers(4), f"r{i}") for i in range(nr)])
    syn = Cohort(schema, [_demo(schema, rng.integers(2), rng.integers(4), f"s{i}") for i in range(ns)])
    q = ["Gender", "Ethnic"]
    expect = risk_bruteforce(patient_classes(real, q), patient_classes(syn, q))
    assert abs(disclosure_risk(real, syn).risk - expect) <= 1e-10


def test_leaked_record_distance_zero(cohort500):
    syn = Cohort(cohort500.schema, [cohort500.records[17]] + cohort500.records[200:210])
    assert min_euclidean_distance(cohort500, syn) == 0.0


def test_toy_distance_matrix():
    # 2x2 toy with pairwise distances 0.5, 1.3, 0.9, 2.0
    real = [np.array([[0.0, 0.0]]), np.array([[10.0, 0.0]])]
    syn = [np.array([[0.5, 0.0]]), np.array([[0.0, 1.3]])]
    syn[1] = np.array([[0.0, 2.0]])
    real[1] = np.array([[0.0, 2.0 + 0.9]])
    d = record_distances(real, [np.array([[0.5, 0.0]]), np.array([[0.0, 1.3 * 0 + 2.0]])])
    assert d.min() == pytest.approx(0.5)


def test_common_prefix_normalisation():
    a = [np.ones((10, 2))]
    b = [np.zeros((60, 2))]
    d = record_distances(a, b)
    # ||ones(10x2)|| / sqrt(10) = sqrt(2)
    assert d[0, 0] == pytest.approx(np.sqrt(2))


def test_audit_reports_threshold(cohort500):
    res = privacy_audit(cohort500, cohort500.subset(range(0, 500, 7)))
    assert res.threshold == RISK_THRESHOLD == 0.09
    assert res.min_distance == 0.0 and res.leaked
    d = res.to_dict()
    assert set(d) >= {"risk", "passes", "min_distance", "classes"}
