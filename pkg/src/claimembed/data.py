"""Claims table loading, categorical vocabularies, encodings and CV splits."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

MISSING_LEVEL = "(missing)"
UNSEEN_LEVEL = "(unseen)"

KINDS = ("numeric", "categorical", "response", "exposure")
TRANSFORMS = ("none", "log", "normalize", "zone_prefix")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ColumnSchema:
    """One column of the claims table.

    ``source`` lets a derived column (e.g. a zone prefix) be built from another
    header column; it defaults to ``name``.
    """

    name: str
    kind: str
    transform: str = "none"
    source: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown column kind {self.kind!r}")
        if self.transform not in TRANSFORMS:
            raise SchemaError(f"unknown transform {self.transform!r}")
        if self.transform == "zone_prefix" and self.kind != "categorical":
            raise SchemaError("zone_prefix applies to categorical columns only")

    @property
    def header(self) -> str:
        return self.source or self.name


def nfip_schema() -> list[ColumnSchema]:
    """Default column roles, named after the OpenFEMA claims fields."""
    return [
        ColumnSchema("amountPaidOnBuildingClaim", "response"),
        ColumnSchema("totalBuildingInsuranceCoverage", "exposure", "log"),
        ColumnSchema("communityRatingSystemDiscount", "numeric"),
        ColumnSchema("basementEnclosureCrawlspaceType", "categorical"),
        ColumnSchema("occupancyType", "categorical"),
        ColumnSchema("numberOfFloorsInTheInsuredBuilding", "categorical"),
        ColumnSchema("floodZone", "categorical"),
        ColumnSchema("primaryResidence", "categorical"),
        ColumnSchema("floodZonePrefix", "categorical", "zone_prefix", source="floodZone"),
    ]


def validate_schema(schema: Sequence[ColumnSchema]) -> None:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise SchemaError("column names must be unique")
    responses = [c for c in schema if c.kind == "response"]
    if len(responses) != 1:
        raise SchemaError(f"exactly one response column required, got {len(responses)}")
    if sum(c.kind == "exposure" for c in schema) > 1:
        raise SchemaError("at most one exposure column")


@dataclass
class LoadReport:
    rows_read: int = 0
    dropped_missing_response: int = 0
    dropped_nonpositive_response: int = 0
    dropped_nonpositive_exposure: int = 0
    imputed: dict[str, int] = field(default_factory=dict)
    missing_levels: dict[str, int] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [
            f"rows read: {self.rows_read}",
            f"dropped (missing response): {self.dropped_missing_response}",
            f"dropped (non-positive response): {self.dropped_nonpositive_response}",
            f"dropped (non-positive exposure): {self.dropped_nonpositive_exposure}",
        ]
        out += [f"median-imputed {k}: {v}" for k, v in self.imputed.items() if v]
        out += [f"{MISSING_LEVEL} level in {k}: {v}" for k, v in self.missing_levels.items() if v]
        return out


@dataclass
class Dataset:
    """Typed claims table: raw numeric values and string category labels."""

    frame: pd.DataFrame
    schema: list[ColumnSchema]
    report: LoadReport = field(default_factory=LoadReport)

    def __post_init__(self):
        validate_schema(self.schema)

    def _names(self, kind: str) -> list[str]:
        return [c.name for c in self.schema if c.kind == kind]

    @property
    def numeric_names(self) -> list[str]:
        return self._names("numeric")

    @property
    def categorical_names(self) -> list[str]:
        return self._names("categorical")

    @property
    def response_name(self) -> str:
        return self._names("response")[0]

    @property
    def exposure_name(self) -> str | None:
        names = self._names("exposure")
        return names[0] if names else None

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    @property
    def y(self) -> np.ndarray:
        return self.frame[self.response_name].to_numpy(dtype=float)

    @property
    def exposure(self) -> np.ndarray | None:
        name = self.exposure_name
        return None if name is None else self.frame[name].to_numpy(dtype=float)

    def column(self, name: str) -> ColumnSchema:
        for c in self.schema:
            if c.name == name:
                return c
        raise KeyError(name)

    def transform_of(self, name: str) -> str:
        return self.column(name).transform

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.frame.iloc[np.asarray(index)].reset_index(drop=True), self.schema, self.report)

    def to_csv(self, path) -> None:
        write_frame(self.frame, path)


def zone_prefix(label: str) -> str:
    """Leading maximal alphabetic run: ``"A01" -> "A"``, ``"AHB" -> "AHB"``."""
    if not label:
        raise ValueError("zone_prefix of an empty label")
    m = re.match(r"[A-Za-z]+", label)
    # labels starting with a digit keep their first character
    return m.group(0) if m else label[0]


def _parse_numeric(values: pd.Series, column: str) -> pd.Series:
    out = pd.to_numeric(values.replace("", np.nan), errors="coerce")
    bad = out.isna() & values.ne("") & values.notna()
    if bad.any():
        example = values[bad].iloc[0]
        raise ValueError(f"unparseable numeric value {example!r} in column {column!r}")
    return out.astype(float)


def _normalize_label(value: str) -> str:
    # pandas/CSV exports write integer codes as "1.0"; keep labels stable
    try:
        f = float(value)
    except ValueError:
        return value
    if math.isfinite(f) and f.is_integer() and "." in value:
        return str(int(f))
    return value


def load_csv(
    path,
    schema: Sequence[ColumnSchema] | None = None,
    require_positive_response: bool = True,
) -> Dataset:
    """Read a claims CSV into a typed ``Dataset``.

    Rows with a missing response are dropped, missing categories become an
    explicit ``"(missing)"`` level and missing numerics are median-imputed.
    Counts of all three land in ``dataset.report``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[])
    except pd.errors.EmptyDataError:
        raise ValueError(f"empty file: {path}") from None
    if raw.empty:
        raise ValueError(f"no data rows in {path}")
    return parse_frame(raw, schema, require_positive_response)


def dataset_from_frame(frame: pd.DataFrame, schema=None, require_positive_response: bool = True) -> Dataset:
    """Same parsing rules as ``load_csv`` for a frame already in memory."""
    raw = frame.apply(lambda s: s.map(lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else format_value(v)))
    return parse_frame(raw.astype(str), schema, require_positive_response)


def parse_frame(raw: pd.DataFrame, schema=None, require_positive_response: bool = True) -> Dataset:
    schema = list(schema) if schema is not None else nfip_schema()
    validate_schema(schema)
    unknown = sorted({c.header for c in schema} - set(raw.columns))
    if unknown:
        raise SchemaError(f"columns not found in header: {unknown}")

    report = LoadReport(rows_read=len(raw))
    raw = raw.apply(lambda s: s.str.strip())
    response = next(c for c in schema if c.kind == "response")
    keep = raw[response.header].ne("")
    report.dropped_missing_response = int((~keep).sum())
    raw = raw[keep].reset_index(drop=True)

    frame = pd.DataFrame(index=raw.index)
    for col in schema:
        values = raw[col.header]
        if col.kind == "categorical":
            missing = values.eq("")
            report.missing_levels[col.name] = int(missing.sum())
            labels = values.where(~missing, MISSING_LEVEL).map(_normalize_label)
            if col.transform == "zone_prefix":
                labels = labels.map(lambda s: s if s == MISSING_LEVEL else zone_prefix(s))
            frame[col.name] = labels.astype(object)
        else:
            numbers = _parse_numeric(values, col.header)
            if col.kind in ("numeric", "exposure") and numbers.isna().any():
                report.imputed[col.name] = int(numbers.isna().sum())
                numbers = numbers.fillna(numbers.median())
            frame[col.name] = numbers

    y = frame[response.name]
    if require_positive_response:
        ok = y > 0
        report.dropped_nonpositive_response = int((~ok).sum())
        frame = frame[ok]
    exposure = [c for c in schema if c.kind == "exposure"]
    if exposure:
        ok = frame[exposure[0].name] > 0
        report.dropped_nonpositive_exposure = int((~ok).sum())
        frame = frame[ok]
    return Dataset(frame.reset_index(drop=True), list(schema), report)


def filter_range(dataset: Dataset, column: str, start: float, end: float, values=None) -> Dataset:
    """Keep rows whose ``column`` lies in ``[start, end]``.

    ``values`` may carry a column that is not part of the schema (e.g. a loss
    year read separately); otherwise ``column`` must be in the frame.
    """
    v = np.asarray(values if values is not None else dataset.frame[column], dtype=float)
    return dataset.subset(np.flatnonzero((v >= start) & (v <= end)))


def subsample(dataset: Dataset, n: int, seed: int) -> Dataset:
    if n >= dataset.n_rows:
        return dataset
    rng = np.random.default_rng(seed)
    return dataset.subset(np.sort(rng.choice(dataset.n_rows, size=n, replace=False)))


def write_frame(frame: pd.DataFrame, path) -> None:
    """CSV writer with shortest round-trip float formatting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(frame.columns)
        columns = [frame[c].tolist() for c in frame.columns]
        for row in zip(*columns):
            w.writerow([format_value(v) for v in row])


def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


# ---------------------------------------------------------------------------
# vocabularies and encodings


@dataclass(frozen=True)
class Vocabulary:
    """Ordered level set of one categorical variable.

    Index ``cardinality`` is reserved for levels never seen when the
    vocabulary was built.
    """

    name: str
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate labels in vocabulary {self.name!r}")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    @classmethod
    def build(cls, name: str, values: Iterable, baseline: str | None = None) -> "Vocabulary":
        labels = sorted({str(v) for v in values})
        if baseline is not None:
            if baseline not in labels:
                raise ValueError(f"baseline {baseline!r} not among levels of {name!r}")
            labels.remove(baseline)
            labels.insert(0, baseline)
        return cls(name, tuple(labels))

    @property
    def cardinality(self) -> int:
        return len(self.labels)

    @property
    def unseen_index(self) -> int:
        return len(self.labels)

    @property
    def baseline(self) -> str:
        return self.labels[0]

    def index(self, label) -> int:
        return self._index.get(str(label), self.unseen_index)

    def label(self, i: int) -> str:
        return UNSEEN_LEVEL if i == self.unseen_index else self.labels[i]

    def encode(self, values) -> np.ndarray:
        lookup = self._index
        unseen = self.unseen_index
        return np.fromiter((lookup.get(str(v), unseen) for v in values), dtype=np.int64, count=len(values))


class UnseenLevelError(ValueError):
    pass


def _checked_indices(vocab: Vocabulary, values) -> np.ndarray:
    idx = vocab.encode(list(values))
    if (idx == vocab.unseen_index).any():
        bad = [v for v, i in zip(values, idx) if i == vocab.unseen_index][0]
        raise UnseenLevelError(f"level {bad!r} not in vocabulary of {vocab.name!r}")
    return idx


def encode_one_hot(values, vocab: Vocabulary) -> np.ndarray:
    idx = _checked_indices(vocab, values)
    out = np.zeros((len(idx), vocab.cardinality))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def encode_dummy(values, vocab: Vocabulary, unseen: str = "error") -> np.ndarray:
    """Indicator columns for every level except the baseline (index 0).

    ``unseen="baseline"`` encodes unknown labels as the all-zero baseline row.
    """
    if unseen == "error":
        idx = _checked_indices(vocab, values)
    elif unseen == "baseline":
        idx = vocab.encode(list(values))
        idx[idx == vocab.unseen_index] = 0
    else:
        raise ValueError(f"unseen must be 'error' or 'baseline', got {unseen!r}")
    out = np.zeros((len(idx), vocab.cardinality))
    out[np.arange(len(idx)), idx] = 1.0
    return out[:, 1:]


class CategoricalEncoder(TransformerMixin, BaseEstimator):
    """Builds one ``Vocabulary`` per column and maps labels to indices."""

    def __init__(self, columns: Sequence[str] = (), baselines: dict | None = None):
        self.columns = columns
        self.baselines = baselines

    def fit(self, X: pd.DataFrame, y=None):
        baselines = self.baselines or {}
        self.vocabularies_ = {
            c: Vocabulary.build(c, X[c].astype(str), baselines.get(c)) for c in self.columns
        }
        return self

    def transform(self, X: pd.DataFrame) -> np.ndarray:
        check_is_fitted(self, "vocabularies_")
        if not self.columns:
            return np.zeros((len(X), 0), dtype=np.int64)
        return np.column_stack([self.vocabularies_[c].encode(X[c].astype(str).tolist()) for c in self.columns])


class NumericTransformer(TransformerMixin, BaseEstimator):
    """Log and/or standardize numeric columns.

    Standardization statistics come from the data passed to ``fit`` only, so
    assessment and test rows are scaled with the analysis statistics.
    """

    def __init__(self, columns: Sequence[str] = (), log_columns: Sequence[str] = (), standardize: bool = True):
        self.columns = columns
        self.log_columns = log_columns
        self.standardize = standardize

    def _raw(self, X: pd.DataFrame) -> np.ndarray:
        if not self.columns:
            return np.zeros((len(X), 0))
        out = np.column_stack([np.asarray(X[c], dtype=float) for c in self.columns])
        for j, c in enumerate(self.columns):
            if c in self.log_columns:
                if (out[:, j] <= 0).any():
                    raise ValueError(f"log transform of non-positive value in {c!r}")
                out[:, j] = np.log(out[:, j])
        return out

    def fit(self, X: pd.DataFrame, y=None):
        raw = self._raw(X)
        self.mean_ = raw.mean(axis=0) if self.standardize else np.zeros(raw.shape[1])
        sd = raw.std(axis=0) if self.standardize else np.ones(raw.shape[1])
        self.scale_ = np.where(sd > 0, sd, 1.0)
        return self

    def transform(self, X: pd.DataFrame) -> np.ndarray:
        check_is_fitted(self, "mean_")
        return (self._raw(X) - self.mean_) / self.scale_


def transform_numeric(dataset: Dataset, fit_index: np.ndarray | None = None) -> Dataset:
    """Apply schema transforms to numeric and exposure columns.

    ``normalize`` statistics are computed on ``fit_index`` rows (all rows when
    omitted) and reused for every other row.
    """
    frame = dataset.frame.copy()
    fit_index = np.arange(dataset.n_rows) if fit_index is None else np.asarray(fit_index)
    for col in dataset.schema:
        if col.kind not in ("numeric", "exposure") or col.transform == "none":
            continue
        values = frame[col.name].to_numpy(dtype=float)
        if col.transform == "log":
            if (values <= 0).any():
                raise ValueError(f"log transform of non-positive value in {col.name!r}")
            frame[col.name] = np.log(values)
        elif col.transform == "normalize":
            ref = values[fit_index]
            sd = ref.std()
            frame[col.name] = (values - ref.mean()) / (sd if sd > 0 else 1.0)
    return Dataset(frame, dataset.schema, dataset.report)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Fold:
    index: int
    train: np.ndarray
    test: np.ndarray
    analysis: np.ndarray
    assessment: np.ndarray


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    n_rows: int
    folds: tuple[Fold, ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of_row(self) -> np.ndarray:
        out = np.empty(self.n_rows, dtype=np.int64)
        for f in self.folds:
            out[f.test] = f.index
        return out

    def to_csv(self, path) -> None:
        """Long format: one line per (fold, row) with role test/analysis/assessment."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "fold", "row", "role"])
            for f in self.folds:
                roles = np.empty(self.n_rows, dtype=object)
                roles[f.test] = "test"
                roles[f.analysis] = "analysis"
                roles[f.assessment] = "assessment"
                for row, role in enumerate(roles):
                    w.writerow([self.seed, f.index, row, role])

    @classmethod
    def from_csv(cls, path) -> "SplitPlan":
        table = pd.read_csv(path)
        seed = int(table["seed"].iloc[0])
        n_rows = int(table["row"].max()) + 1
        folds = []
        for k, part in table.groupby("fold", sort=True):
            def rows(role):
                return np.sort(part.loc[part["role"] == role, "row"].to_numpy())
            test, analysis, assessment = rows("test"), rows("analysis"), rows("assessment")
            folds.append(Fold(int(k), np.sort(np.concatenate([analysis, assessment])), test, analysis, assessment))
        return cls(seed, n_rows, tuple(folds))


def analysis_split(index: np.ndarray, rng: np.random.Generator, fraction: float = 0.8):
    perm = rng.permutation(np.asarray(index))
    n_analysis = int(round(fraction * len(perm)))
    return np.sort(perm[:n_analysis]), np.sort(perm[n_analysis:])


def make_splits(n_rows: int, k: int = 5, seed: int = 0, analysis_fraction: float = 0.8) -> SplitPlan:
    """Uniformly random k-fold assignment plus an analysis/assessment split per training set."""
    if k < 2:
        raise ValueError(f"fold count must be at least 2, got {k}")
    if n_rows < k:
        raise ValueError(f"cannot split {n_rows} rows into {k} folds")
    rng = np.random.default_rng(seed)
    chunks = np.array_split(rng.permutation(n_rows), k)
    folds = []
    for i, chunk in enumerate(chunks):
        test = np.sort(chunk)
        train = np.setdiff1d(np.arange(n_rows), test)
        analysis, assessment = analysis_split(train, rng, analysis_fraction)
        folds.append(Fold(i, train, test, analysis, assessment))
    return SplitPlan(seed, n_rows, tuple(folds))


# ---------------------------------------------------------------------------
# summaries


def level_frequencies(values) -> dict[str, int]:
    counts: dict[str, int] = {}
    for v in values:
        counts[str(v)] = counts.get(str(v), 0) + 1
    return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


def numeric_summary(values) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    q = np.quantile(v, [0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0])
    return {
        "count": float(v.size),
        "mean": float(v.mean()),
        "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "min": q[0], "p05": q[1], "p25": q[2], "median": q[3], "p75": q[4], "p95": q[5], "max": q[6],
    }


def histogram(values, bins: int = 30) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins)
    return counts, edges


def summarize(dataset: Dataset, out_dir=None, bins: int = 30) -> dict:
    """Level frequencies, numeric quantiles and the log-claim histogram.

    With ``out_dir`` set, writes ``categorical_levels.csv``,
    ``numeric_summary.csv`` and ``log_claim_histogram.csv``.
    """
    cats = {c: level_frequencies(dataset.frame[c]) for c in dataset.categorical_names}
    nums = {}
    for c in [dataset.exposure_name, *dataset.numeric_names, dataset.response_name]:
        if c is not None:
            nums[c] = numeric_summary(dataset.frame[c])
    counts, edges = histogram(np.log(dataset.y), bins)
    summary = {"categorical": cats, "numeric": nums, "log_claim_histogram": (counts, edges)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "categorical_levels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "level", "count"])
            for var, freq in cats.items():
                for level, n in freq.items():
                    w.writerow([var, level, n])
        with open(out / "numeric_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            keys = list(next(iter(nums.values())).keys()) if nums else []
            w.writerow(["variable", *keys])
            for var, stats in nums.items():
                w.writerow([var, *(format_value(float(stats[k])) for k in keys)])
        with open(out / "log_claim_histogram.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, n in zip(edges[:-1], edges[1:], counts):
                w.writerow([format_value(float(lo)), format_value(float(hi)), int(n)])
    return summary
