import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from claimembed import data as dp

STATES = ["CA", "MD", "ND", "UT", "WA"]

SCHEMA = [
    dp.ColumnSchema("claim", "response"),
    dp.ColumnSchema("coverage", "exposure", "log"),
    dp.ColumnSchema("crs", "numeric"),
    dp.ColumnSchema("zone", "categorical"),
    dp.ColumnSchema("prefix", "categorical", "zone_prefix", source="zone"),
]


def write(tmp_path, text, name="claims.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_one_hot_states():
    vocab = dp.Vocabulary.build("state", STATES)
    out = dp.encode_one_hot(STATES, vocab)
    np.testing.assert_array_equal(out, np.eye(5))
    assert out[0].tolist() == [1, 0, 0, 0, 0]
    assert out[4].tolist() == [0, 0, 0, 0, 1]


def test_dummy_states():
    vocab = dp.Vocabulary.build("state", STATES)
    out = dp.encode_dummy(STATES, vocab)
    assert out[0].tolist() == [0, 0, 0, 0]
    assert out[1].tolist() == [1, 0, 0, 0]
    np.testing.assert_array_equal(out[1:], np.eye(4))


def test_baseline_override():
    vocab = dp.Vocabulary.build("state", STATES, baseline="UT")
    assert vocab.baseline == "UT"
    assert dp.encode_dummy(["UT"], vocab).tolist() == [[0, 0, 0, 0]]
    with pytest.raises(ValueError):
        dp.Vocabulary.build("state", STATES, baseline="NY")


def test_encoders_reject_unseen_level():
    vocab = dp.Vocabulary.build("state", STATES)
    with pytest.raises(dp.UnseenLevelError):
        dp.encode_one_hot(["NY"], vocab)
    with pytest.raises(dp.UnseenLevelError):
        dp.encode_dummy(["NY"], vocab)
    assert dp.encode_dummy(["NY"], vocab, unseen="baseline").tolist() == [[0, 0, 0, 0]]


labels = st.lists(st.text("ABCDEFXYZ", min_size=1, max_size=3), min_size=1, max_size=40)


@settings(max_examples=50, deadline=None)
@given(labels)
def test_encoding_row_sums(values):
    vocab = dp.Vocabulary.build("v", values)
    assert (dp.encode_one_hot(values, vocab).sum(axis=1) == 1).all()
    dummy = dp.encode_dummy(values, vocab)
    assert dummy.shape[1] == vocab.cardinality - 1
    assert set(np.unique(dummy.sum(axis=1))) <= {0.0, 1.0}


@settings(max_examples=50, deadline=None)
@given(labels)
def test_vocabulary_round_trip(values):
    vocab = dp.Vocabulary.build("v", values)
    assert list(vocab.labels) == sorted(set(values))
    for i in range(vocab.cardinality):
        assert vocab.index(vocab.label(i)) == i
    assert vocab.unseen_index == vocab.cardinality
    assert vocab.label(vocab.unseen_index) == dp.UNSEEN_LEVEL
    assert vocab.index("never-seen-label") == vocab.unseen_index


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValueError):
        dp.Vocabulary("v", ("a", "a"))


@pytest.mark.parametrize("label, expected", [("A01", "A"), ("V", "V"), ("AHB", "AHB"), ("AE", "AE"), ("X500", "X")])
def test_zone_prefix(label, expected):
    assert dp.zone_prefix(label) == expected


def test_zone_prefix_empty():
    with pytest.raises(ValueError):
        dp.zone_prefix("")


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=8).filter(lambda s: s.strip() == s))
def test_zone_prefix_idempotent(label):
    once = dp.zone_prefix(label)
    assert dp.zone_prefix(once) == once


def test_load_three_rows(tmp_path):
    path = write(tmp_path, "claim,coverage,crs,zone\n10,100000,5,A01\n20,50000,0,AE\n30,2000,10,X\n")
    ds = dp.load_csv(path, SCHEMA)
    assert ds.n_rows == 3
    assert ds.frame["prefix"].tolist() == ["A", "AE", "X"]
    assert ds.y.tolist() == [10, 20, 30]


def test_load_drops_blank_response(tmp_path):
    path = write(tmp_path, "claim,coverage,crs,zone\n10,100000,5,A01\n,50000,0,AE\n30,2000,10,X\n")
    ds = dp.load_csv(path, SCHEMA)
    assert ds.n_rows == 2
    assert ds.report.dropped_missing_response == 1
    assert "dropped (missing response): 1" in ds.report.lines()


def test_load_missing_policy(tmp_path):
    path = write(tmp_path, "claim,coverage,crs,zone\n10,100000,,A01\n20,50000,2,\n30,2000,4,X\n")
    ds = dp.load_csv(path, SCHEMA)
    assert ds.frame["crs"].tolist() == [3.0, 2.0, 4.0]
    assert ds.report.imputed["crs"] == 1
    assert ds.frame["zone"].tolist()[1] == dp.MISSING_LEVEL
    assert ds.frame["prefix"].tolist()[1] == dp.MISSING_LEVEL
    assert ds.report.missing_levels["zone"] == 1


def test_load_normalizes_float_codes(tmp_path):
    path = write(tmp_path, "claim,coverage,crs,zone\n10,100000,1,1.0\n20,50000,2,2\n")
    assert dp.load_csv(path, SCHEMA).frame["zone"].tolist() == ["1", "2"]


@pytest.mark.parametrize(
    "text, error",
    [
        ("claim,coverage,zone\n1,2,A\n", dp.SchemaError),
        ("claim,coverage,crs,zone\n1,2,abc,A\n", ValueError),
        ("", ValueError),
        ("claim,coverage,crs,zone\n", ValueError),
    ],
)
def test_load_errors(tmp_path, text, error):
    with pytest.raises(error):
        dp.load_csv(write(tmp_path, text), SCHEMA)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        dp.load_csv(tmp_path / "nope.csv", SCHEMA)


def test_schema_needs_one_response():
    with pytest.raises(dp.SchemaError):
        dp.validate_schema([dp.ColumnSchema("a", "numeric")])
    with pytest.raises(dp.SchemaError):
        dp.ColumnSchema("a", "numeric", "zone_prefix")


def test_default_schema_fields():
    names = [c.name for c in dp.nfip_schema()]
    assert "amountPaidOnBuildingClaim" in names and "floodZonePrefix" in names


def test_log_transform():
    frame = pd.DataFrame({"claim": [1.0, 2.0], "coverage": [100000.0, 1.0], "crs": [0.0, 1.0], "zone": ["A", "B"], "prefix": ["A", "B"]})
    out = dp.transform_numeric(dp.Dataset(frame, SCHEMA))
    assert out.frame["coverage"].iloc[0] == pytest.approx(11.5129, abs=1e-4)
    assert out.frame["coverage"].iloc[1] == 0.0


def test_log_of_nonpositive():
    frame = pd.DataFrame({"claim": [1.0], "coverage": [0.0], "crs": [0.0], "zone": ["A"], "prefix": ["A"]})
    with pytest.raises(ValueError):
        dp.transform_numeric(dp.Dataset(frame, SCHEMA))


def test_normalize_uses_fit_rows_only(rng):
    schema = [dp.ColumnSchema("y", "response"), dp.ColumnSchema("x", "numeric", "normalize")]
    x = np.concatenate([rng.normal(0, 1, 80), rng.normal(5, 3, 20)])
    ds = dp.Dataset(pd.DataFrame({"y": np.ones(100), "x": x}), schema)
    fit, rest = np.arange(80), np.arange(80, 100)
    out = dp.transform_numeric(ds, fit).frame["x"].to_numpy()
    assert abs(out[fit].mean()) < 1e-10 and abs(out[fit].std() - 1) < 1e-10
    expected = (x[rest] - x[fit].mean()) / x[fit].std()
    np.testing.assert_allclose(out[rest], expected, rtol=1e-14)
    own = (x[rest] - x[rest].mean()) / x[rest].std()
    assert not np.allclose(out[rest], own)


def test_numeric_transformer_uses_fit_statistics(rng):
    a = pd.DataFrame({"x": rng.normal(2, 3, 50), "c": rng.uniform(1, 10, 50)})
    b = pd.DataFrame({"x": rng.normal(9, 1, 20), "c": rng.uniform(1, 10, 20)})
    t = dp.NumericTransformer(["x", "c"], log_columns=["c"]).fit(a)
    fitted = t.transform(a)
    np.testing.assert_allclose(fitted.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(t.transform(b)[:, 0], (b["x"] - a["x"].mean()) / a["x"].std(ddof=0), rtol=1e-13)


def test_splits_small():
    plan = dp.make_splits(10, 5, seed=1)
    assert [len(f.test) for f in plan.folds] == [2] * 5
    assert sorted(np.concatenate([f.test for f in plan.folds]).tolist()) == list(range(10))


def test_splits_arithmetic():
    plan = dp.make_splits(100000, 5, seed=0)
    for f in plan.folds:
        assert len(f.train) == 80000
        assert (len(f.analysis), len(f.assessment)) == (64000, 16000)


def test_splits_deterministic():
    a, b = dp.make_splits(57, 5, seed=3), dp.make_splits(57, 5, seed=3)
    for fa, fb in zip(a.folds, b.folds):
        for part in ("test", "analysis", "assessment"):
            np.testing.assert_array_equal(getattr(fa, part), getattr(fb, part))
    c = dp.make_splits(57, 5, seed=4)
    assert not np.array_equal(a.folds[0].test, c.folds[0].test)


@pytest.mark.parametrize("n, k", [(10, 1), (3, 5)])
def test_splits_errors(n, k):
    with pytest.raises(ValueError):
        dp.make_splits(n, k)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(0, 300), st.integers(0, 1000))
def test_split_partition(k, extra, seed):
    n = k + extra
    plan = dp.make_splits(n, k, seed)
    tests = np.concatenate([f.test for f in plan.folds])
    assert np.array_equal(np.sort(tests), np.arange(n))
    sizes = [len(f.test) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    for f in plan.folds:
        both = np.concatenate([f.analysis, f.assessment])
        assert np.array_equal(np.sort(both), f.train)
        assert np.intersect1d(f.train, f.test).size == 0
        assert len(f.analysis) == round(0.8 * len(f.train))


def test_split_plan_csv_round_trip(tmp_path):
    plan = dp.make_splits(23, 4, seed=9)
    plan.to_csv(tmp_path / "s.csv")
    back = dp.SplitPlan.from_csv(tmp_path / "s.csv")
    assert back.seed == 9 and back.k == 4
    for a, b in zip(plan.folds, back.folds):
        for part in ("train", "test", "analysis", "assessment"):
            np.testing.assert_array_equal(getattr(a, part), getattr(b, part))
    assert (plan.fold_of_row() == back.fold_of_row()).all()


def test_level_frequencies():
    assert dp.level_frequencies(["a", "a", "b"]) == {"a": 2, "b": 1}


def test_numeric_median():
    assert dp.numeric_summary([1, 2, 3, 4])["median"] == 2.5


def test_log_claim_histogram_unimodal(tmp_path):
    rng = np.random.default_rng(0)
    frame = pd.DataFrame({"claim": rng.lognormal(9, 1, 20000), "coverage": np.full(20000, 1e5), "crs": 0.0, "zone": "A", "prefix": "A"})
    summary = dp.summarize(dp.Dataset(frame, SCHEMA), tmp_path, bins=15)
    counts, _ = summary["log_claim_histogram"]
    peak = int(np.argmax(counts))
    assert (np.diff(counts[: peak + 1]) >= 0).all() and (np.diff(counts[peak:]) <= 0).all()
    for name in ("categorical_levels.csv", "numeric_summary.csv", "log_claim_histogram.csv"):
        assert (tmp_path / name).exists()
    levels = pd.read_csv(tmp_path / "categorical_levels.csv")
    assert levels.iloc[0].tolist() == ["zone", "A", 20000]


def test_subsample_and_filter(small_claims):
    small_claims, _ = small_claims
    sub = dp.subsample(small_claims, 100, seed=2)
    assert sub.n_rows == 100
    assert sub.frame.equals(dp.subsample(small_claims, 100, seed=2).frame)
    assert dp.subsample(small_claims, 10**6, seed=2) is small_claims
    years = np.arange(small_claims.n_rows) % 30 + 1990
    kept = dp.filter_range(small_claims, "year", 2000, 2019, values=years)
    assert kept.n_rows == int(((years >= 2000) & (years <= 2019)).sum())


def test_write_frame_round_trip(tmp_path, small_claims):
    small_claims, _ = small_claims
    small_claims.to_csv(tmp_path / "d.csv")
    back = dp.load_csv(tmp_path / "d.csv", small_claims.schema[:-1] + [dp.ColumnSchema("floodZonePrefix", "categorical")])
    np.testing.assert_array_equal(back.y, small_claims.y)
    assert back.frame["floodZone"].tolist() == small_claims.frame["floodZone"].tolist()
