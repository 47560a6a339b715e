"""Generalized linear models fit by iteratively reweighted least squares.

Covers the gamma/log severity GLM on dummy-coded factors, the same GLM with
categorical factors replaced by learned embedding values, and the capped
linear-regression benchmark.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_is_fitted

from .data import Vocabulary, encode_dummy
from .validation import check_frame, check_response


class RankDeficientError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# families and links


class Gamma:
    name = "gamma"

    @staticmethod
    def variance(mu):
        return mu * mu

    @staticmethod
    def deviance(y, mu):
        return float(2.0 * np.sum((y - mu) / mu - np.log(y / mu)))

    @staticmethod
    def check(y):
        if np.any(y <= 0):
            raise ValueError("gamma family requires a strictly positive response")


class Gaussian:
    name = "gaussian"

    @staticmethod
    def variance(mu):
        return np.ones_like(mu)

    @staticmethod
    def deviance(y, mu):
        return float(np.sum((y - mu) ** 2))

    @staticmethod
    def check(y):
        pass


class LogLink:
    name = "log"

    @staticmethod
    def link(mu):
        return np.log(mu)

    @staticmethod
    def inverse(eta):
        return np.exp(eta)

    @staticmethod
    def derivative(mu):
        return 1.0 / mu


class IdentityLink:
    name = "identity"

    @staticmethod
    def link(mu):
        return mu

    @staticmethod
    def inverse(eta):
        return eta

    @staticmethod
    def derivative(mu):
        return np.ones_like(mu)


FAMILIES = {"gamma": Gamma, "gaussian": Gaussian}
LINKS = {"log": LogLink, "identity": IdentityLink}


@dataclass(frozen=True)
class GlmSpec:
    family: str = "gamma"
    link: str = "log"
    terms: tuple[str, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        if len(set(self.terms)) != len(self.terms):
            raise ValueError("term names must be unique")


@dataclass
class GlmFit:
    coef: np.ndarray
    term_names: list[str]
    family: str
    link: str
    n_iter: int
    converged: bool
    deviance: float
    deviance_trace: list[float]
    dispersion: float
    cov_unscaled: np.ndarray
    n_obs: int
    # variable -> (level labels in vocabulary order, dummy term names for levels 1..)
    factors: dict[str, tuple[tuple[str, ...], list[str]]] = field(default_factory=dict)

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_unscaled) * self.dispersion)

    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.term_names, self.coef.tolist()))

    def predict(self, design: np.ndarray) -> np.ndarray:
        if "(Intercept)" in self.term_names:
            design = np.column_stack([np.ones(len(design)), design])
        return LINKS[self.link].inverse(design @ self.coef)


def check_rank(design: np.ndarray, rtol: float = 1e-10) -> None:
    """Column-pivoted QR rank check; raises ``RankDeficientError``."""
    if design.shape[1] == 0:
        return
    if design.shape[0] < design.shape[1]:
        raise RankDeficientError(f"{design.shape[1]} columns but only {design.shape[0]} rows")
    r = scipy.linalg.qr(design, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(r))
    if diag[0] == 0 or (diag < rtol * diag[0]).any():
        rank = int((diag >= rtol * diag[0]).sum()) if diag[0] > 0 else 0
        raise RankDeficientError(f"design matrix is rank deficient (rank {rank} of {design.shape[1]})")


def independent_columns(design: np.ndarray, intercept: bool = True, rtol: float = 1e-8) -> np.ndarray:
    """Indices of a maximal linearly independent subset of design columns.

    With ``intercept`` the columns are judged after removing their mean, so
    columns that only reproduce the constant term are dropped.
    """
    X = np.asarray(design, dtype=float)
    if X.shape[1] == 0:
        return np.arange(0)
    norms = np.linalg.norm(X, axis=0)
    X = X / np.where(norms > 0, norms, 1.0)
    if intercept:
        X = X - X.mean(axis=0)
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    rank = int((np.abs(np.diag(r)) > rtol).sum())
    return np.sort(piv[:rank])


def _safe_deviance(family, y, mu) -> float:
    if not np.all(np.isfinite(mu)) or (family is Gamma and np.any(mu <= 0)):
        return math.inf
    return family.deviance(y, mu)


def fit_iwls(
    spec: GlmSpec,
    design: np.ndarray,
    y: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> GlmFit:
    """Fit a GLM by IWLS, stopping when ``max|delta beta| < tol``.

    An intercept column is prepended when ``spec.intercept`` is set. If an
    update increases the deviance the step is halved, so the deviance trace is
    non-increasing.
    """
    family, link = FAMILIES[spec.family], LINKS[spec.link]
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    y = np.asarray(y, dtype=float)
    if len(y) != len(design):
        raise ValueError("design and response lengths differ")
    family.check(y)
    names = list(spec.terms) if spec.terms else [f"x{j}" for j in range(design.shape[1])]
    if len(names) != design.shape[1]:
        raise ValueError("term count does not match design columns")
    X = np.column_stack([np.ones(len(y)), design]) if spec.intercept else design
    if spec.intercept:
        names = ["(Intercept)", *names]
    check_rank(X)

    if spec.link == "log":
        mu = np.maximum(y, 1e-10 * max(abs(y).max(), 1.0)) if spec.family == "gaussian" else y.copy()
    else:
        mu = y.copy()
    eta = link.link(mu)

    def solve(mu, eta):
        gprime = link.derivative(mu)
        w = 1.0 / (family.variance(mu) * gprime**2)
        z = eta + (y - mu) * gprime
        sw = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        return beta

    beta = solve(mu, eta)
    trace: list[float] = []
    converged = False
    n_iter = 1
    eta = X @ beta
    mu = link.inverse(eta)
    dev = family.deviance(y, mu)
    trace.append(dev)
    if spec.family == "gaussian" and spec.link == "identity":
        converged = True
    while not converged and n_iter < max_iter:
        n_iter += 1
        new = solve(mu, eta)
        for _ in range(40):
            new_eta = X @ new
            with np.errstate(over="ignore", invalid="ignore"):
                new_mu = link.inverse(new_eta)
            new_dev = _safe_deviance(family, y, new_mu)
            if math.isfinite(new_dev) and new_dev <= dev * (1 + 1e-12) + 1e-300:
                break
            new = (new + beta) / 2.0
        else:
            new, new_eta, new_mu, new_dev = beta, eta, mu, dev
        delta = np.max(np.abs(new - beta))
        beta, eta, mu, dev = new, new_eta, new_mu, new_dev
        trace.append(dev)
        if delta < tol:
            converged = True
    if not converged:
        warnings.warn(f"IWLS did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2)

    gprime = link.derivative(mu)
    w = 1.0 / (family.variance(mu) * gprime**2)
    xtwx = X.T @ (X * w[:, None])
    cov = np.linalg.inv(xtwx)
    dof = max(len(y) - X.shape[1], 1)
    if spec.family == "gaussian":
        dispersion = float(np.sum((y - mu) ** 2) / dof)
    else:
        dispersion = float(np.sum((y - mu) ** 2 / family.variance(mu)) / dof)
    return GlmFit(beta, names, spec.family, spec.link, n_iter, converged, dev, trace, dispersion, cov, len(y))


def relativities(fit: GlmFit) -> list[tuple[str, str, float]]:
    """``exp(coefficient)`` per dummy level, baseline reported as 1.0."""
    if fit.link != "log":
        raise ValueError("relativities are only defined for a log link")
    coefs = fit.coefficients()
    rows = []
    for var, (labels, terms) in fit.factors.items():
        rows.append((var, labels[0], 1.0))
        for label, term in zip(labels[1:], terms):
            rows.append((var, label, math.exp(coefs[term])))
    return rows


def param_count_dummy(n_num: int, cardinalities: Sequence[int]) -> int:
    return 1 + n_num + sum(cardinalities) - len(cardinalities)


def param_count_embedding(n_num: int, n_cat: int) -> int:
    return 1 + n_num + n_cat


def floor_predictions(pred, floor: float = 0.01) -> np.ndarray:
    return np.maximum(np.asarray(pred, dtype=float), floor)


def linear_benchmark(design, y, new_design=None, floor: float = 0.01) -> np.ndarray:
    """Least-squares fit, predictions capped below at ``floor``."""
    fit = fit_iwls(GlmSpec("gaussian", "identity"), design, y)
    return floor_predictions(fit.predict(np.asarray(design if new_design is None else new_design, dtype=float)), floor)


# ---------------------------------------------------------------------------
# estimator


class GlmRegressor(RegressorMixin, BaseEstimator):
    """GLM over a claims frame with numeric and categorical columns.

    Categorical columns are dummy coded against the first vocabulary level
    (lexicographic unless overridden through ``baselines``). Columns listed in
    ``embeddings`` are instead replaced by their embedding values, one design
    column per embedding dimension.

    Parameters
    ----------
    family, link : str
        ``"gamma"``/``"log"`` for severity, ``"gaussian"``/``"identity"`` for
        the linear benchmark.
    numeric, categorical : sequence of str
        Column names used as predictors.
    log_columns : sequence of str
        Numeric columns entered as their natural log.
    embeddings : mapping of column -> EmbeddingTable, optional
    baselines : mapping of column -> level, optional
    min_prediction : float, optional
        Floor applied to predictions at scoring time.
    unseen : {"baseline", "error"}
        Treatment of factor levels absent from the training data.
    standardize_embeddings : bool
        Center and scale embedding columns with training statistics. Off by
        default, so raw embedding values enter the design.
    """

    def __init__(
        self,
        family: str = "gamma",
        link: str = "log",
        numeric: Sequence[str] = (),
        categorical: Sequence[str] = (),
        log_columns: Sequence[str] = (),
        embeddings: Mapping | None = None,
        baselines: Mapping[str, str] | None = None,
        fit_intercept: bool = True,
        min_prediction: float | None = None,
        unseen: str = "baseline",
        standardize_embeddings: bool = False,
        tol: float = 1e-8,
        max_iter: int = 50,
    ):
        self.family = family
        self.link = link
        self.numeric = numeric
        self.categorical = categorical
        self.log_columns = log_columns
        self.embeddings = embeddings
        self.baselines = baselines
        self.fit_intercept = fit_intercept
        self.min_prediction = min_prediction
        self.unseen = unseen
        self.standardize_embeddings = standardize_embeddings
        self.tol = tol
        self.max_iter = max_iter

    def _numeric_block(self, X):
        cols = []
        for c in self.numeric:
            v = np.asarray(X[c], dtype=float)
            if c in self.log_columns:
                if (v <= 0).any():
                    raise ValueError(f"log transform of non-positive value in {c!r}")
                v = np.log(v)
            cols.append(v)
        return cols, list(self.numeric)

    def _design(self, X) -> tuple[np.ndarray, list[str]]:
        cols, names = self._numeric_block(X)
        embeddings = self.embeddings or {}
        for var in self.categorical:
            labels = X[var].astype(str).tolist()
            if var in embeddings:
                block = np.asarray(embeddings[var].lookup(labels), dtype=float)
                if self.standardize_embeddings:
                    if var not in self.embedding_scale_:
                        sd = block.std(axis=0)
                        self.embedding_scale_[var] = (block.mean(axis=0), np.where(sd > 0, sd, 1.0))
                    mean, sd = self.embedding_scale_[var]
                    block = (block - mean) / sd
                if block.shape[1] == 1:
                    term_names = [var]
                else:
                    term_names = [f"{var}_e{k + 1}" for k in range(block.shape[1])]
            else:
                vocab = self.vocabularies_[var]
                block = encode_dummy(labels, vocab, unseen=self.unseen)
                term_names = [f"{var}={lab}" for lab in vocab.labels[1:]]
            cols.extend(block.T)
            names.extend(term_names)
        design = np.column_stack(cols) if cols else np.zeros((len(X), 0))
        return design, names

    def fit(self, X: pd.DataFrame, y):
        X = check_frame(X, [*self.numeric, *self.categorical])
        y = check_response(y, len(X))
        missing = [c for c in (self.embeddings or {}) if c not in self.categorical]
        if missing:
            raise ValueError(f"embeddings given for non-categorical columns: {missing}")
        baselines = self.baselines or {}
        embeddings = self.embeddings or {}
        self.vocabularies_ = {
            var: Vocabulary.build(var, X[var].astype(str), baselines.get(var))
            for var in self.categorical
            if var not in embeddings
        }
        self.embedding_scale_ = {}
        design, names = self._design(X)
        spec = GlmSpec(self.family, self.link, tuple(names), self.fit_intercept)
        fit = fit_iwls(spec, design, y, tol=self.tol, max_iter=self.max_iter)
        fit.factors = {
            var: (vocab.labels, [f"{var}={lab}" for lab in vocab.labels[1:]])
            for var, vocab in self.vocabularies_.items()
        }
        self.fit_ = fit
        self.term_names_ = fit.term_names
        self.coef_ = fit.coef[1:] if self.fit_intercept else fit.coef
        self.intercept_ = float(fit.coef[0]) if self.fit_intercept else 0.0
        self.n_features_in_ = len(self.numeric) + len(self.categorical)
        return self

    def predict(self, X: pd.DataFrame) -> np.ndarray:
        check_is_fitted(self, "fit_")
        X = check_frame(X, [*self.numeric, *self.categorical])
        design, _ = self._design(X)
        pred = self.fit_.predict(design)
        if self.min_prediction is not None:
            pred = floor_predictions(pred, self.min_prediction)
        return pred

    def relativities(self) -> list[tuple[str, str, float]]:
        check_is_fitted(self, "fit_")
        return relativities(self.fit_)

    @property
    def n_parameters_(self) -> int:
        return len(self.fit_.coef)


class LinearBenchmark(GlmRegressor):
    """Gaussian/identity GLM with predictions floored at 0.01."""

    def __init__(
        self,
        numeric: Sequence[str] = (),
        categorical: Sequence[str] = (),
        log_columns: Sequence[str] = (),
        baselines: Mapping[str, str] | None = None,
        min_prediction: float = 0.01,
    ):
        super().__init__(
            family="gaussian",
            link="identity",
            numeric=numeric,
            categorical=categorical,
            log_columns=log_columns,
            baselines=baselines,
            min_prediction=min_prediction,
        )

    def get_params(self, deep=True):
        return {k: getattr(self, k) for k in ("numeric", "categorical", "log_columns", "baselines", "min_prediction")}


def fit_with_embeddings(
    numeric: Sequence[str],
    X: pd.DataFrame,
    y,
    tables: Mapping,
    log_columns: Sequence[str] = (),
    family: str = "gamma",
    link: str = "log",
    categorical: Sequence[str] | None = None,
) -> GlmRegressor:
    """GLM whose categorical predictors are the given embedding lookups.

    ``categorical`` defaults to every table; naming a variable without a
    table raises ``KeyError``.
    """
    categorical = list(tables) if categorical is None else list(categorical)
    missing = [c for c in categorical if c not in tables]
    if missing:
        raise KeyError(f"no embedding table for {missing}")
    return GlmRegressor(
        family=family,
        link=link,
        numeric=numeric,
        categorical=categorical,
        log_columns=log_columns,
        embeddings=tables,
    ).fit(X, y)


# ---------------------------------------------------------------------------
# exports


def write_coefficients(fit: GlmFit, path) -> None:
    """Plain ``term = value`` lines, full float precision."""
    with open(path, "w") as fh:
        for name, value in zip(fit.term_names, fit.coef):
            fh.write(f"{name} = {float(value)!r}\n")


def read_coefficients(path) -> dict[str, float]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                name, _, value = line.rpartition(" = ")
                out[name] = float(value)
    return out


def write_relativities(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "label", "relativity"])
        for var, label, rel in rows:
            w.writerow([var, label, repr(float(rel))])


def format_relativities(rows) -> str:
    width = max((len(lab) for _, lab, _ in rows), default=5)
    vwidth = max((len(v) for v, _, _ in rows), default=8)
    lines = [f"{'variable':<{vwidth}}  {'label':<{width}}  relativity"]
    lines += [f"{v:<{vwidth}}  {lab:<{width}}  {rel:10.2f}" for v, lab, rel in rows]
    return "\n".join(lines)
