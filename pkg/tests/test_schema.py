import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from replaygan.schema import (
    BINARY, CATEGORICAL, NUMERIC, Cohort, EncodedBatch, PatientRecord, ScalingParams, SchemaError,
    VariableSchema, VariableSpec, decode_cohort, encode_cohort, hiv_schema, segment_records, validate_schema,
)


def test_hiv_schema_is_valid(schema):
    assert validate_schema(schema) == []
    kinds = [v.kind for v in schema.variables]
    assert kinds.count(NUMERIC) == 3 and kinds.count(BINARY) == 5 and kinds.count(CATEGORICAL) == 5
    assert schema.quasi_identifiers == ("Gender", "Ethnic")


def test_widths(schema):
    # numeric channels plus one-hot blocks
    assert schema.encoded_width == 3 + sum(len(v.levels) for v in schema.nonnumeric) == 37
    # numeric channels plus embedding dims 2 (binary) and 4 (categorical)
    assert schema.embed_width == 3 + 5 * 2 + 5 * 4 == 33


def test_duplicate_name_violation():
    s = VariableSchema((VariableSpec("VL", NUMERIC), VariableSpec("VL", NUMERIC)))
    problems = validate_schema(s)
    assert len(problems) == 1 and "duplicate name" in problems[0]


def test_empty_levels_violation():
    s = VariableSchema((VariableSpec("X", CATEGORICAL, levels=()),))
    problems = validate_schema(s)
    assert len(problems) == 1 and "levels empty" in problems[0]


def _toy_schema(transform="log"):
    return VariableSchema((VariableSpec("VL", NUMERIC, transform=transform),
                           VariableSpec("Gender", BINARY, levels=("Male", "Female"), static=True)))


def _toy_cohort(vl=(10.0, 100.0, 1000.0), gender=0):
    s = _toy_schema()
    vals = np.c_[np.array(vl), np.full(len(vl), gender)]
    return Cohort(s, [PatientRecord("a", vals)])


def test_log_minmax_example():
    enc = encode_cohort(_toy_cohort())
    np.testing.assert_allclose(enc.values[0, :, 0], [0.0, 0.5, 1.0], atol=1e-12)


def test_onehot_male():
    enc = encode_cohort(_toy_cohort(gender=0))
    np.testing.assert_array_equal(enc.values[0, :, 1:], [[1, 0]] * 3)


def test_decode_examples():
    c = _toy_cohort()
    scaling = ScalingParams.fit(c)
    vals = np.array([[[0.5, 0.2, 0.8]], [[0.5, 0.5, 0.5]]])
    out = decode_cohort(EncodedBatch(vals, np.array([1, 1]), scaling), c.schema)
    assert out.records[0].values[0, 1] == 1  # Female
    assert out.records[1].values[0, 1] == 0  # tie goes to Male
    assert out.records[0].values[0, 0] == pytest.approx(100.0, rel=1e-12)


def test_decode_width_mismatch(schema):
    bad = EncodedBatch(np.zeros((1, 10, 5)), np.array([10]), ScalingParams({}))
    with pytest.raises(SchemaError):
        decode_cohort(bad, schema)


def test_unknown_level_names_record_and_variable(schema, small_cohort):
    rec = small_cohort.records[0]
    vals = rec.values.copy()
    vals[0, schema.index("Ethnic")] = 9
    with pytest.raises(SchemaError, match=r"p00000.*Ethnic"):
        encode_cohort(Cohort(schema, [PatientRecord(rec.patient_id, vals)]))


def test_from_frame_unknown_level(schema, small_cohort):
    df = small_cohort.to_frame()
    df.loc[0, "Ethnic"] = "Martian"
    with pytest.raises(SchemaError, match="Ethnic"):
        Cohort.from_frame(df, schema)


def test_round_trip_surrogate(small_cohort):
    enc = encode_cohort(small_cohort)
    back = decode_cohort(enc, small_cohort.schema)
    assert back.equals(small_cohort, rtol=1e-9)


def test_simplex_blocks(small_cohort):
    enc = encode_cohort(small_cohort)
    for v, sl in small_cohort.schema.layout():
        if not v.is_numeric:
            for i, n in enumerate(enc.lengths):
                np.testing.assert_allclose(enc.values[i, :n, sl].sum(-1), 1.0, atol=1e-9)
    num = [sl.start for v, sl in small_cohort.schema.layout() if v.is_numeric]
    assert enc.values[..., num].min() >= 0 and enc.values[..., num].max() <= 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1e6, allow_nan=False), st.integers(0, 1)), min_size=10, max_size=10),
       st.integers(1, 3))
def test_round_trip_property(rows, n_records):
    s = VariableSchema((VariableSpec("VL", NUMERIC, transform="log1p"),
                        VariableSpec("Drug", BINARY, levels=("False", "True"))))
    recs = [PatientRecord(f"r{k}", np.array(rows, dtype=float) * [1 + k, 1]) for k in range(n_records)]
    c = Cohort(s, recs)
    back = decode_cohort(encode_cohort(c), s)
    assert back.equals(c, rtol=1e-7)


def test_csv_round_trip(tmp_path, small_cohort):
    p = tmp_path / "c.csv"
    small_cohort.to_csv(p)
    header = p.read_text().splitlines()[0].split(",")
    assert header[:2] == ["patient_id", "timepoint"] and len(header) == 15
    assert Cohort.read_csv(p, small_cohort.schema).equals(small_cohort)


def _raw(months, pid="x"):
    s = hiv_schema()
    rows = []
    for m in months:
        row = {"patient_id": pid, "month": m}
        for v in s.variables:
            row[v.name] = 100.0 + m if v.is_numeric else v.levels[0]
        rows.append(row)
    return pd.DataFrame(rows), s


def test_segment_truncates_to_multiple_of_ten():
    raw, s = _raw(range(23))
    recs, rep = segment_records(raw, s)
    assert [r.length for r in recs] == [20]


def test_segment_split_on_gap():
    raw, s = _raw(list(range(12)) + list(range(12 + 8, 12 + 8 + 15)))
    recs, rep = segment_records(raw, s, gap_months=6)
    assert [r.length for r in recs] == [10, 10]


def test_segment_drops_short():
    raw, s = _raw(range(9))
    recs, rep = segment_records(raw, s)
    assert recs == [] and rep.n_dropped_short == 1


def test_segment_last_value_per_month_wins():
    raw, s = _raw(range(10))
    extra = raw.iloc[[3]].copy()
    extra["VL"] = 7.0
    raw = pd.concat([raw, extra], ignore_index=True)
    recs, _ = segment_records(raw, s)
    assert recs[0].values[3, s.index("VL")] == 7.0


def test_segment_lengths_property():
    rng = np.random.default_rng(0)
    raw_all = []
    for p in range(20):
        months = np.sort(rng.choice(150, rng.integers(5, 140), replace=False))
        raw, s = _raw(months, pid=f"p{p}")
        raw_all.append(raw)
    recs, _ = segment_records(pd.concat(raw_all), s)
    assert all(r.length % 10 == 0 and 10 <= r.length <= 100 for r in recs)


def test_schema_hash_and_dict(schema):
    again = VariableSchema.from_dict(schema.to_dict())
    assert again.hash() == schema.hash()
    assert again == schema


def test_where_filters(small_cohort):
    sub = small_cohort.where(Ethnic="African")
    assert len(sub) > 0
    assert all(r.values[0, small_cohort.schema.index("Ethnic")] == 1 for r in sub)
