"""Metrics, cross-validation and the model-ladder experiments."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .attention import SimpleAttentionRegressor, TabTransformerRegressor
from .data import Dataset, SplitPlan, make_splits
from .glm import GlmRegressor, GlmSpec, LinearBenchmark, fit_iwls, independent_columns
from .nets import EmbeddingNetRegressor

MODELS = (
    "glm-dummy",
    "mlp-1d",
    "glm-embed",
    "mlp-multid",
    "simple-attention",
    "tabtransformer",
    "linear-benchmark",
)
NEURAL = {"mlp-1d", "mlp-multid", "simple-attention", "tabtransformer"}
LABELS = {
    "glm-dummy": "GLM (gamma/log link), dummy-coded factors",
    "mlp-1d": "MLP with 1-dimensional embeddings",
    "glm-embed": "GLM (gamma/log link), factors replaced with embeddings",
    "mlp-multid": "MLP with multidimensional embeddings",
    "simple-attention": "Simple attention network",
    "tabtransformer": "TabTransformer",
    "linear-benchmark": "Linear regression, predictions capped below at 0.01",
}


# ---------------------------------------------------------------------------
# metrics


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if len(pred) != len(actual):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(actual)} actuals")
    if len(pred) == 0:
        raise ValueError("empty input")
    return pred, actual


def rmse(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def mae(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.mean(np.abs(pred - actual)))


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    n: int

    @classmethod
    def of(cls, pred, actual) -> "Metrics":
        return cls(rmse(pred, actual), mae(pred, actual), len(np.ravel(actual)))

    @classmethod
    def mean(cls, items: Sequence["Metrics"]) -> "Metrics":
        return cls(
            float(np.mean([m.rmse for m in items])),
            float(np.mean([m.mae for m in items])),
            int(sum(m.n for m in items)),
        )


# ---------------------------------------------------------------------------
# feature sets


@dataclass(frozen=True)
class FeatureSet:
    numeric: tuple[str, ...]
    categorical: tuple[str, ...]
    log_columns: tuple[str, ...]
    exposure: str


def feature_set(dataset: Dataset, granularity: str = "full") -> FeatureSet:
    """Predictors implied by the schema.

    ``"full"`` uses every source categorical at its own granularity;
    ``"coarse"`` swaps each source for the derived column built from it (for
    example flood zone for its prefix).
    """
    if granularity not in ("full", "coarse"):
        raise ValueError(f"granularity must be 'full' or 'coarse', got {granularity!r}")
    if dataset.exposure_name is None:
        raise ValueError("the models need an exposure column")
    derived = {c.source: c.name for c in dataset.schema if c.kind == "categorical" and c.source and c.source != c.name}
    sources = [c for c in dataset.categorical_names if c not in derived.values()]
    categorical = [derived.get(c, c) for c in sources] if granularity == "coarse" else sources
    numeric = [*dataset.numeric_names, dataset.exposure_name]
    logs = [c for c in numeric if dataset.transform_of(c) == "log"]
    return FeatureSet(tuple(numeric), tuple(categorical), tuple(logs), dataset.exposure_name)


# ---------------------------------------------------------------------------
# model construction


class EmbeddingGlmRegressor(RegressorMixin, BaseEstimator):
    """Gamma GLM whose factors are replaced by embeddings from a 1-d embedding network.

    The network is trained first (with its own early-stopping split or the
    given ``eval_set``); the GLM is then fit on every training row.
    """

    def __init__(
        self,
        numeric: Sequence[str] = (),
        categorical: Sequence[str] = (),
        exposure: str = "exposure",
        log_columns: Sequence[str] = (),
        embedding_dim="one",
        hidden_units: int = 8,
        learning_rate: float = 0.01,
        batch_size: int = 1000,
        max_epochs: int = 15,
        patience: int = 5,
        random_state: int = 0,
    ):
        self.numeric = numeric
        self.categorical = categorical
        self.exposure = exposure
        self.log_columns = log_columns
        self.embedding_dim = embedding_dim
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state

    def fit(self, X: pd.DataFrame, y, eval_set=None):
        self.net_ = EmbeddingNetRegressor(
            numeric=self.numeric,
            categorical=self.categorical,
            exposure=self.exposure,
            log_columns=self.log_columns,
            embedding_dim=self.embedding_dim,
            hidden_units=self.hidden_units,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            random_state=self.random_state,
        ).fit(X, y, eval_set=eval_set)
        self.embeddings_ = self.net_.embeddings_
        X_all, y_all = X, np.asarray(y, dtype=float)
        if eval_set is not None:
            X_all = pd.concat([X, eval_set[0]], ignore_index=True)
            y_all = np.concatenate([y_all, np.asarray(eval_set[1], dtype=float)])
        self.glm_ = GlmRegressor(
            numeric=self.numeric,
            categorical=self.categorical,
            log_columns=self.log_columns,
            embeddings=self.embeddings_,
        ).fit(X_all, y_all)
        self.n_features_in_ = self.glm_.n_features_in_
        return self

    def predict(self, X: pd.DataFrame) -> np.ndarray:
        check_is_fitted(self, "glm_")
        return self.glm_.predict(X)

    @property
    def n_parameters_(self) -> int:
        return self.glm_.n_parameters_


def build_model(name: str, features: FeatureSet, config: dict | None = None, seed: int = 0):
    """Unfitted estimator for a ladder entry; ``config`` overrides constructor defaults."""
    config = dict(config or {})
    config.pop("granularity", None)
    common = dict(numeric=features.numeric, categorical=features.categorical, log_columns=features.log_columns)
    neural = dict(common, exposure=features.exposure, random_state=seed)
    if name == "glm-dummy":
        model = GlmRegressor(**common)
    elif name == "linear-benchmark":
        model = LinearBenchmark(**common)
    elif name == "mlp-1d":
        model = EmbeddingNetRegressor(**neural, embedding_dim="one")
    elif name == "mlp-multid":
        model = EmbeddingNetRegressor(**neural, embedding_dim="half")
    elif name == "glm-embed":
        model = EmbeddingGlmRegressor(**neural)
    elif name == "simple-attention":
        model = SimpleAttentionRegressor(**neural)
    elif name == "tabtransformer":
        model = TabTransformerRegressor(**neural)
    else:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODELS)}")
    unknown = set(config) - set(model.get_params())
    if unknown:
        raise ValueError(f"unknown settings for {name}: {sorted(unknown)}")
    for key, value in config.items():
        setattr(model, key, value)
    return model


def default_granularity(name: str) -> str:
    return "coarse" if name in ("glm-dummy", "linear-benchmark") else "full"


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class ExperimentSpec:
    model: str
    folds: int = 5
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")

    @property
    def granularity(self) -> str:
        return self.config.get("granularity", default_granularity(self.model))

    def config_json(self) -> str:
        return json.dumps(self.config, sort_keys=True, separators=(",", ":"))


@dataclass
class FoldResult:
    fold: int
    metrics: Metrics
    seconds: float
    fit_rows: np.ndarray
    test_rows: np.ndarray
    model: object = None


class FoldError(RuntimeError):
    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold}: {type(cause).__name__}: {cause}")
        self.fold = fold
        self.cause = cause


@dataclass
class EvalReport:
    spec: ExperimentSpec
    folds: list[FoldResult]

    @property
    def mean(self) -> Metrics:
        return Metrics.mean([f.metrics for f in self.folds])

    def rows(self) -> list[list]:
        base = [self.spec.model, self.spec.seed, self.spec.config_json()]
        out = [[*base, f.fold, f.metrics.rmse, f.metrics.mae, f.metrics.n] for f in self.folds]
        m = self.mean
        out.append([*base, "mean", m.rmse, m.mae, m.n])
        return out

    def to_csv(self, path) -> None:
        write_report_rows([self], path)


REPORT_HEADER = ["model", "seed", "config", "fold", "rmse", "mae", "n"]


def write_report_rows(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for report in reports:
            for row in report.rows():
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def audit_fold(fit_rows: np.ndarray, test_rows: np.ndarray) -> None:
    """Raise if any held-out row was used for fitting."""
    leaked = np.intersect1d(fit_rows, test_rows)
    if len(leaked):
        raise AssertionError(f"{len(leaked)} test rows used in fitting, e.g. {leaked[:5].tolist()}")


def fit_fold(spec: ExperimentSpec, dataset: Dataset, fold, features: FeatureSet | None = None):
    """Fit ``spec.model`` on one fold; returns ``(model, fit_rows)``."""
    features = features or feature_set(dataset, spec.granularity)
    model = build_model(spec.model, features, spec.config, seed=spec.seed * 1000 + fold.index)
    X, y = dataset.frame, dataset.y
    if spec.model in NEURAL or spec.model == "glm-embed":
        model.fit(
            X.iloc[fold.analysis].reset_index(drop=True),
            y[fold.analysis],
            eval_set=(X.iloc[fold.assessment].reset_index(drop=True), y[fold.assessment]),
        )
        fit_rows = np.concatenate([fold.analysis, fold.assessment])
    else:
        model.fit(X.iloc[fold.train].reset_index(drop=True), y[fold.train])
        fit_rows = np.asarray(fold.train)
    return model, fit_rows


def cross_validate(
    spec: ExperimentSpec,
    dataset: Dataset,
    plan: SplitPlan | None = None,
    keep_models: bool = False,
    log=None,
) -> EvalReport:
    """K-fold evaluation of one ladder entry.

    Neural models early-stop on each training fold's assessment part; GLMs
    are fit on the whole training fold. Every fold is audited for test-row
    leakage.
    """
    plan = plan or make_splits(dataset.n_rows, spec.folds, spec.seed)
    if plan.k != spec.folds:
        raise ValueError(f"split plan has {plan.k} folds, spec asks for {spec.folds}")
    if plan.n_rows != dataset.n_rows:
        raise ValueError("split plan does not match the dataset size")
    features = feature_set(dataset, spec.granularity)
    results = []
    for fold in plan.folds:
        start = time.perf_counter()
        try:
            model, fit_rows = fit_fold(spec, dataset, fold, features)
            audit_fold(fit_rows, fold.test)
            test = dataset.frame.iloc[fold.test].reset_index(drop=True)
            metrics = Metrics.of(model.predict(test), dataset.y[fold.test])
        except AssertionError:
            raise
        except Exception as exc:
            raise FoldError(fold.index, exc) from exc
        seconds = time.perf_counter() - start
        if log is not None:
            log(f"{spec.model} seed {spec.seed} fold {fold.index}: rmse {metrics.rmse:,.2f} mae {metrics.mae:,.2f} ({seconds:.1f}s)")
        results.append(FoldResult(fold.index, metrics, seconds, np.sort(fit_rows), np.sort(fold.test), model if keep_models else None))
    return EvalReport(spec, results)


def transfer_pipeline(dataset: Dataset, spec: ExperimentSpec | None = None, plan=None, log=None) -> EvalReport:
    """Cross-validated embedding transfer: per fold, train the 1-d network, then the GLM on its embeddings."""
    spec = spec or ExperimentSpec("glm-embed")
    if spec.model != "glm-embed":
        raise ValueError("transfer_pipeline runs the glm-embed model")
    return cross_validate(spec, dataset, plan, keep_models=True, log=log)


# ---------------------------------------------------------------------------
# ladder


@dataclass
class LadderResult:
    reports: list[EvalReport]
    errors: dict[int, str] = field(default_factory=dict)

    def to_csv(self, path) -> None:
        write_report_rows(self.reports, path)

    def table(self) -> str:
        return format_table([(LABELS[r.spec.model], r.mean) for r in self.reports])


def format_table(rows: Sequence[tuple[str, Metrics]], first: str = "Model") -> str:
    """Aligned text table with thousands separators."""
    cells = [(name, f"{m.rmse:,.0f}", f"{m.mae:,.0f}") for name, m in rows]
    w0 = max([len(first), *(len(c[0]) for c in cells)])
    w1 = max([4, *(len(c[1]) for c in cells)])
    w2 = max([3, *(len(c[2]) for c in cells)])
    lines = [f"{first:<{w0}}  {'RMSE':>{w1}}  {'MAE':>{w2}}", f"{'-' * w0}  {'-' * w1}  {'-' * w2}"]
    lines += [f"{a:<{w0}}  {b:>{w1}}  {c:>{w2}}" for a, b, c in cells]
    return "\n".join(lines) + "\n"


def run_ladder(dataset: Dataset, specs: Sequence[ExperimentSpec], log=None) -> LadderResult:
    """One report per spec, in spec order; a failing spec is recorded and the rest still run."""
    if not specs:
        raise ValueError("no models to run")
    reports, errors = [], {}
    for i, spec in enumerate(specs):
        try:
            reports.append(cross_validate(spec, dataset, log=log))
        except Exception as exc:
            errors[i] = f"{spec.model}: {exc}"
            if log is not None:
                log(f"{spec.model} failed: {exc}")
    return LadderResult(reports, errors)


# ---------------------------------------------------------------------------
# static vs contextual embeddings


@dataclass
class ContextualResult:
    static: Metrics
    contextual: Metrics
    static_terms: int
    contextual_terms: int

    def rows(self) -> list[tuple[str, Metrics]]:
        return [("static", self.static), ("contextual", self.contextual)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["embedding", "rmse", "mae", "n", "terms"])
            for (kind, m), terms in zip(self.rows(), (self.static_terms, self.contextual_terms)):
                w.writerow([kind, repr(m.rmse), repr(m.mae), m.n, terms])

    def table(self) -> str:
        return format_table([("Embedding", self.static), ("Contextual embedding", self.contextual)], first="Embedding type")


def embedding_glm_metrics(features: np.ndarray, y: np.ndarray, fit_idx, eval_idx) -> tuple[Metrics, int]:
    """Gamma GLM on the given embedding columns only; collinear columns are dropped."""
    keep = independent_columns(features[fit_idx])
    design = features[:, keep]
    fit = fit_iwls(GlmSpec("gamma", "log"), design[fit_idx], y[fit_idx])
    return Metrics.of(fit.predict(design[eval_idx]), y[eval_idx]), len(keep)


def compare_embeddings(static: np.ndarray, contextual: np.ndarray, y, seed: int = 0, fit_fraction: float = 0.5) -> ContextualResult:
    """Fit the static and contextual GLMs on one random part of the rows, score on the rest."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    if len(static) != n or len(contextual) != n:
        raise ValueError("embedding rows and responses differ in length")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(fit_fraction * n))
    fit_idx, eval_idx = np.sort(order[:cut]), np.sort(order[cut:])
    s, ks = embedding_glm_metrics(np.asarray(static, dtype=float), y, fit_idx, eval_idx)
    c, kc = embedding_glm_metrics(np.asarray(contextual, dtype=float), y, fit_idx, eval_idx)
    return ContextualResult(s, c, ks, kc)


def contextual_comparison(
    dataset: Dataset,
    sample_size: int = 10_000,
    variables: Sequence[str] = ("floodZone",),
    seed: int = 0,
    folds: int = 5,
    fold: int = 0,
    config: dict | None = None,
    model: TabTransformerRegressor | None = None,
) -> tuple[ContextualResult, TabTransformerRegressor, np.ndarray]:
    """Static vs contextual embedding GLMs on a sample of one fold's held-out rows.

    A TabTransformer is trained on the fold's training rows unless a fitted
    ``model`` is passed. Returns the paired metrics, the model and the
    sampled row indices.
    """
    plan = make_splits(dataset.n_rows, folds, seed)
    f = plan.folds[fold]
    if sample_size > len(f.test):
        raise ValueError(f"sample of {sample_size} exceeds the {len(f.test)} rows of fold {fold}")
    if model is None:
        model, _ = fit_fold(ExperimentSpec("tabtransformer", folds, seed, dict(config or {})), dataset, f)
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(f.test, size=sample_size, replace=False))
    X = dataset.frame.iloc[rows].reset_index(drop=True)
    static, contextual = [], []
    for var in variables:
        s, c = model.extract_contextual(X, var)
        static.append(s)
        contextual.append(c)
    result = compare_embeddings(np.hstack(static), np.hstack(contextual), dataset.y[rows], seed=seed)
    return result, model, rows


def model_settings(name: str) -> set[str]:
    """Config keys accepted by a ladder entry."""
    dummy = FeatureSet((), (), (), "exposure")
    return set(build_model(name, dummy).get_params()) | {"granularity"}
