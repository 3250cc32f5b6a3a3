"""Leakage audits: minimum record distance and the sample-to-population disclosure risk."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .schema import Cohort, ScalingParams, encode_records

RISK_THRESHOLD = 0.09


def record_distances(real: list[np.ndarray], syn: list[np.ndarray]) -> np.ndarray:
    """Distance matrix [len(real), len(syn)] between encoded records of shape [T, W].

    Each pair is compared over its common prefix of m months: the Euclidean
    norm of the difference divided by sqrt(m), so records of different length
    stay on one scale.
    """
    out = np.empty((len(real), len(syn)))
    lr = np.array([len(a) for a in real])
    ls = np.array([len(b) for b in syn])
    for Lr in np.unique(lr):
        ir = np.flatnonzero(lr == Lr)
        for Ls in np.unique(ls):
            js = np.flatnonzero(ls == Ls)
            m = int(min(Lr, Ls))
            a = np.stack([real[i][:m].ravel() for i in ir])
            b = np.stack([syn[j][:m].ravel() for j in js])
            out[np.ix_(ir, js)] = cdist(a, b) / np.sqrt(m)
    return out


def min_euclidean_distance(real: Cohort, syn: Cohort, scaling: ScalingParams | None = None) -> float:
    """Smallest distance between any synthetic record and any real record (0 means a leaked record)."""
    if real.schema.hash() != syn.schema.hash():
        raise ValueError("cohorts must share a schema")
    if not len(real) or not len(syn):
        raise ValueError("min_euclidean_distance needs two nonempty cohorts")
    scaling = scaling or ScalingParams.fit(real)
    enc = lambda c: [encode_records(r.values, c.schema, scaling) for r in c]  # noqa: E731
    return float(record_distances(enc(real), enc(syn)).min())


@dataclass
class RiskResult:
    risk: float
    S: int
    # class (tuple of level names) -> (F_s real patient count, present in both)
    equivalence_class_table: dict[tuple, tuple[int, bool]] = field(default_factory=dict)
    min_distance: float = float("nan")
    threshold: float = RISK_THRESHOLD

    @property
    def passes(self) -> bool:
        return self.risk <= self.threshold

    @property
    def leaked(self) -> bool:
        return self.min_distance == 0.0

    def to_dict(self) -> dict:
        return {
            "risk": self.risk,
            "S": self.S,
            "threshold": self.threshold,
            "passes": self.passes,
            "min_distance": self.min_distance,
            "leaked": self.leaked,
            "classes": [{"class": list(k), "F_s": f, "in_both": b}
                        for k, (f, b) in sorted(self.equivalence_class_table.items())],
        }


def patient_classes(cohort: Cohort, quasi_ids) -> list[tuple]:
    """One quasi-identifier tuple per record; quasi-identifiers must be constant within a record."""
    schema = cohort.schema
    cols = []
    for q in quasi_ids:
        if q not in schema.names or schema[q].is_numeric:
            raise ValueError(f"quasi-identifier {q!r} must be a non-numeric schema variable")
        cols.append(schema.index(q))
    out = []
    for rec in cohort:
        vals = rec.values[:, cols]
        if np.any(vals != vals[0]):
            bad = [quasi_ids[k] for k in np.flatnonzero(np.any(vals != vals[0], axis=0))]
            raise ValueError(f"record {rec.patient_id}: quasi-identifier(s) {bad} vary within the record")
        out.append(tuple(schema[q].levels[int(v)] for q, v in zip(quasi_ids, vals[0])))
    return out


def disclosure_risk(real: Cohort, syn: Cohort, quasi_ids=None) -> RiskResult:
    """(1/S) * sum over synthetic records of I_s / F_s on patient-level equivalence classes.

    F_s counts real patients sharing record s's class; I_s says whether that
    class exists in both cohorts.
    """
    if real.schema.hash() != syn.schema.hash():
        raise ValueError("cohorts must share a schema")
    quasi_ids = list(quasi_ids if quasi_ids is not None else real.schema.quasi_identifiers)
    if not quasi_ids:
        raise ValueError("no quasi-identifiers given")
    real_counts = Counter(patient_classes(real, quasi_ids))
    syn_classes = patient_classes(syn, quasi_ids)
    S = len(syn_classes)
    total = 0.0
    for c in syn_classes:
        f = real_counts.get(c, 0)
        if f:
            total += 1.0 / f
    table = {c: (real_counts.get(c, 0), c in real_counts) for c in set(syn_classes)}
    return RiskResult(total / S if S else 0.0, S, table)


def privacy_audit(real: Cohort, syn: Cohort, quasi_ids=None) -> RiskResult:
    res = disclosure_risk(real, syn, quasi_ids)
    res.min_distance = min_euclidean_distance(real, syn)
    return res
