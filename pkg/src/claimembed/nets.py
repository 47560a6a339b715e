"""Embedding layers and the feed-forward severity networks.

The networks predict the paid fraction of the building coverage through a
sigmoid output and multiply it by the raw coverage amount, so predictions
always fall strictly between zero and the exposure.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data import UNSEEN_LEVEL, CategoricalEncoder, NumericTransformer, Vocabulary, analysis_split
from .validation import check_exposure, check_frame, check_response


def embedding_dim(rule, cardinality: int) -> int:
    """Embedding width for a variable: ``"one"``, ``"half"`` or a fixed int.

    ``"half"`` counts the reserved unseen row with the levels, giving
    ``ceil((n + 1) / 2)`` columns (4 levels -> 3).
    """
    if rule == "one":
        return 1
    if rule == "half":
        return math.ceil((cardinality + 1) / 2)
    d = int(rule)
    if d < 1:
        raise ValueError("embedding dimension must be at least 1")
    return d


def lower_median(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Median that picks the lower middle value for even counts."""
    values = np.sort(np.asarray(values, dtype=float), axis=axis)
    n = values.shape[axis]
    if n == 0:
        raise ValueError("median of an empty set")
    return np.take(values, (n - 1) // 2, axis=axis)


@dataclass
class EmbeddingTable:
    """Level vectors for one variable; the last row is the unseen-level slot."""

    vocabulary: Vocabulary
    weights: np.ndarray
    rule: str = "fixed"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.vocabulary.cardinality + 1:
            raise ValueError("embedding table needs cardinality + 1 rows")
        if self.weights.shape[1] < 1:
            raise ValueError("embedding dimension must be at least 1")

    @property
    def name(self) -> str:
        return self.vocabulary.name

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def lookup(self, labels) -> np.ndarray:
        return self.weights[self.vocabulary.encode(list(labels))]

    def impute_unseen(self) -> None:
        self.weights[-1] = lower_median(self.weights[:-1], axis=0)


def impute_unseen(tables: dict[str, EmbeddingTable]) -> dict[str, EmbeddingTable]:
    for t in tables.values():
        t.impute_unseen()
    return tables


def export_embeddings(tables: dict[str, EmbeddingTable], path) -> None:
    """CSV rows ``variable, level, e1..eq``; the unseen slot is labelled ``(unseen)``."""
    width = max(t.dim for t in tables.values())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "level", *(f"e{k + 1}" for k in range(width))])
        for name, t in tables.items():
            labels = [*t.vocabulary.labels, UNSEEN_LEVEL]
            for label, row in zip(labels, t.weights):
                w.writerow([name, label, *(repr(float(v)) for v in row), *([""] * (width - t.dim))])


def import_embeddings(path) -> dict[str, EmbeddingTable]:
    rows: dict[str, list[tuple[str, list[float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for var, level, *values in reader:
            rows.setdefault(var, []).append((level, [float(v) for v in values if v != ""]))
    tables = {}
    for var, entries in rows.items():
        labels = tuple(lab for lab, _ in entries if lab != UNSEEN_LEVEL)
        unseen = [vec for lab, vec in entries if lab == UNSEEN_LEVEL]
        seen = [vec for lab, vec in entries if lab != UNSEEN_LEVEL]
        if len(unseen) != 1:
            raise ValueError(f"variable {var!r} needs exactly one {UNSEEN_LEVEL} row")
        tables[var] = EmbeddingTable(Vocabulary(var, labels), np.array(seen + unseen))
    return tables


# ---------------------------------------------------------------------------
# training loop


class Batch(NamedTuple):
    cat: np.ndarray
    num: np.ndarray
    exposure: np.ndarray
    y: np.ndarray | None = None

    def take(self, idx) -> "Batch":
        return Batch(self.cat[idx], self.num[idx], self.exposure[idx], None if self.y is None else self.y[idx])

    def __len__(self) -> int:
        return len(self.exposure)


@dataclass
class TrainHistory:
    analysis_loss: list[float] = field(default_factory=list)
    assessment_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def n_epochs(self) -> int:
        return len(self.assessment_loss)


def train_loop(
    params: ad.ParameterSet,
    loss_fn: Callable[[np.ndarray, np.random.Generator], ad.Tensor],
    eval_fn: Callable[[], float],
    n_rows: int,
    rng: np.random.Generator,
    learning_rate: float,
    batch_size: int,
    max_epochs: int,
    patience: int,
) -> TrainHistory:
    """Minibatch Adam with early stopping on the assessment loss.

    The parameters with the lowest assessment loss are restored at the end.
    "Improvement" means strictly below the running best.
    """
    if n_rows == 0:
        raise ValueError("empty analysis set")
    if not 1 <= patience <= max_epochs:
        raise ValueError(f"patience must be in [1, max_epochs={max_epochs}], got {patience}")
    history = TrainHistory()
    best = math.inf
    best_state = params.snapshot()
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n_rows)
        total = 0.0
        for start in range(0, n_rows, batch_size):
            idx = order[start : start + batch_size]
            loss = loss_fn(idx, rng)
            loss.backward()
            ad.adam_step(params, learning_rate)
            total += float(loss.data) * len(idx)
        history.analysis_loss.append(total / n_rows)
        score = float(eval_fn())
        history.assessment_loss.append(score)
        if score < best:
            best = score
            history.best_epoch = epoch
            best_state = params.snapshot()
        elif epoch - history.best_epoch >= patience:
            break
    params.restore(best_state)
    return history


# ---------------------------------------------------------------------------
# network pieces shared by every severity model


def dense_head(params: ad.ParameterSet, features: ad.Tensor, exposure, training, rng, dropout_rate) -> ad.Tensor:
    """``sigmoid(W2 . dropout(relu(W1 . x + b1)) + b2) * exposure``."""
    h = ad.relu(features @ params["dense.w"] + params["dense.b"])
    h = ad.dropout(h, dropout_rate, rng, training)
    out = ad.sigmoid(h @ params["out.w"] + params["out.b"])
    return out * np.asarray(exposure, dtype=float)[:, None]


def init_head(params: ad.ParameterSet, rng, n_features: int, hidden: int, base_rate: float) -> None:
    params.add("dense.w", ad.glorot_uniform(rng, n_features, hidden))
    params.add("dense.b", np.zeros((1, hidden)))
    params.add("out.w", ad.glorot_uniform(rng, hidden, 1))
    rate = min(max(base_rate, 1e-3), 1 - 1e-3)
    params.add("out.b", np.full((1, 1), math.log(rate / (1 - rate))))


def init_embedding(params: ad.ParameterSet, rng, name: str, cardinality: int, dim: int) -> None:
    params.add(f"emb:{name}", ad.glorot_uniform(rng, cardinality + 1, dim, shape=(cardinality + 1, dim)))


def lookup(params: ad.ParameterSet, name: str, indices: np.ndarray) -> ad.Tensor:
    table = params[f"emb:{name}"]
    return ad.embed_lookup(table, indices, frozen_rows=(table.shape[0] - 1,))


class NeuralSeverityRegressor(RegressorMixin, BaseEstimator):
    """Shared fit/predict machinery for the embedding-based severity networks.

    Subclasses implement ``_init_params`` and ``_forward``.
    """

    _registry: dict[str, type] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        NeuralSeverityRegressor._registry[cls.__name__] = cls

    # -- subclass hooks ---------------------------------------------------
    def _init_params(self, rng, cardinalities: dict[str, int], n_numeric: int, base_rate: float) -> ad.ParameterSet:
        raise NotImplementedError

    def _forward(self, params, batch: Batch, training: bool, rng) -> ad.Tensor:
        raise NotImplementedError

    # -- data plumbing ----------------------------------------------------
    def _columns(self) -> list[str]:
        cols = [*self.numeric, *self.categorical, self.exposure]
        return list(dict.fromkeys(cols))

    def _batch(self, X: pd.DataFrame, y=None) -> Batch:
        cat = self.encoder_.transform(X)
        num = self.scaler_.transform(X)
        exposure = check_exposure(X[self.exposure])
        return Batch(cat, num, exposure, None if y is None else np.asarray(y, dtype=float))

    def fit(self, X: pd.DataFrame, y, eval_set=None):
        """Train on ``X``; early stopping uses ``eval_set`` or a random 20% of ``X``."""
        X = check_frame(X, self._columns())
        y = check_response(y, len(X))
        rng = ad.make_rng(self.random_state)
        if eval_set is None:
            analysis, assessment = analysis_split(np.arange(len(X)), rng, 1.0 - self.validation_fraction)
            X_val, y_val = X.iloc[assessment], y[assessment]
            X, y = X.iloc[analysis], y[analysis]
        else:
            X_val, y_val = eval_set
            X_val = check_frame(X_val, self._columns())
            y_val = check_response(y_val, len(X_val))
        self.encoder_ = CategoricalEncoder(list(self.categorical)).fit(X)
        self.scaler_ = NumericTransformer(list(self.numeric), list(self.log_columns)).fit(X)
        train = self._batch(X, y)
        val = self._batch(X_val, y_val)
        cards = {c: v.cardinality for c, v in self.encoder_.vocabularies_.items()}
        base_rate = float(train.y.sum() / train.exposure.sum())
        self.params_ = self._init_params(rng, cards, train.num.shape[1], base_rate)

        def loss_fn(idx, rng):
            b = train.take(idx)
            return ad.mse_loss(self._forward(self.params_, b, True, rng), b.y[:, None])

        def eval_fn():
            return float(np.mean((self._predict_batch(val) - val.y) ** 2))

        self.history_ = train_loop(
            self.params_,
            loss_fn,
            eval_fn,
            len(train),
            rng,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
        )
        self._impute_unseen()
        self.n_features_in_ = len(self._columns())
        return self

    def _impute_unseen(self) -> None:
        for name in self.categorical:
            t = self.params_[f"emb:{name}"]
            t.data[-1] = lower_median(t.data[:-1], axis=0)

    def _predict_batch(self, batch: Batch, chunk: int = 20000) -> np.ndarray:
        out = [
            self._forward(self.params_, batch.take(slice(s, s + chunk)), False, None).data[:, 0]
            for s in range(0, len(batch), chunk)
        ]
        return np.concatenate(out)

    def predict(self, X: pd.DataFrame) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_frame(X, self._columns())
        return self._predict_batch(self._batch(X))

    @property
    def embeddings_(self) -> dict[str, EmbeddingTable]:
        check_is_fitted(self, "params_")
        return {
            name: EmbeddingTable(self.encoder_.vocabularies_[name], self.params_[f"emb:{name}"].data.copy(), str(self._dim_rule()))
            for name in self.categorical
        }

    def _dim_rule(self):
        return getattr(self, "embedding_dim", "fixed")

    def export_embeddings(self, path) -> None:
        export_embeddings(self.embeddings_, path)

    def n_parameters(self) -> int:
        return self.params_.count()


class EmbeddingNetRegressor(NeuralSeverityRegressor):
    """Embeddings and normalized numerics into one ReLU layer, sigmoid output times exposure.

    ``embedding_dim="one"`` gives scalar level embeddings, ``"half"`` uses
    ``ceil((cardinality + 1) / 2)`` dimensions per variable and an int fixes
    a common width.
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
        validation_fraction: float = 0.2,
        dropout: float = 0.0,
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
        self.validation_fraction = validation_fraction
        self.dropout = dropout
        self.random_state = random_state

    def _init_params(self, rng, cardinalities, n_numeric, base_rate):
        params = ad.ParameterSet()
        width = 0
        for name in self.categorical:
            dim = embedding_dim(self.embedding_dim, cardinalities[name])
            init_embedding(params, rng, name, cardinalities[name], dim)
            width += dim
        init_head(params, rng, width + n_numeric, self.hidden_units, base_rate)
        return params

    def features(self, params, batch: Batch) -> ad.Tensor:
        parts = [lookup(params, name, batch.cat[:, j]) for j, name in enumerate(self.categorical)]
        parts.append(ad.Tensor(batch.num))
        return ad.concat(parts, axis=1)

    def _forward(self, params, batch, training, rng):
        return dense_head(params, self.features(params, batch), batch.exposure, training, rng, self.dropout)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: NeuralSeverityRegressor, path) -> None:
    """JSON checkpoint: class, constructor params, vocabularies, scaler and parameter arrays.

    Floats are written with round-trip precision, so loading reproduces the
    model's predictions exactly.
    """
    check_is_fitted(model, "params_")
    payload = {
        "class": type(model).__name__,
        "params": {k: list(v) if isinstance(v, tuple) else v for k, v in model.get_params().items()},
        "vocabularies": {k: list(v.labels) for k, v in model.encoder_.vocabularies_.items()},
        "scaler": {"mean": model.scaler_.mean_.tolist(), "scale": model.scaler_.scale_.tolist()},
        "weights": {k: {"shape": list(t.shape), "values": t.data.ravel().tolist()} for k, t in model.params_.items()},
        "history": {
            "analysis_loss": model.history_.analysis_loss,
            "assessment_loss": model.history_.assessment_loss,
            "best_epoch": model.history_.best_epoch,
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_checkpoint(path) -> NeuralSeverityRegressor:
    with open(path) as fh:
        payload = json.load(fh)
    cls = NeuralSeverityRegressor._registry[payload["class"]]
    model = cls(**payload["params"])
    model.encoder_ = CategoricalEncoder(list(model.categorical))
    model.encoder_.vocabularies_ = {k: Vocabulary(k, tuple(v)) for k, v in payload["vocabularies"].items()}
    model.scaler_ = NumericTransformer(list(model.numeric), list(model.log_columns))
    model.scaler_.mean_ = np.array(payload["scaler"]["mean"], dtype=float)
    model.scaler_.scale_ = np.array(payload["scaler"]["scale"], dtype=float)
    model.params_ = ad.ParameterSet(
        {k: np.array(v["values"], dtype=float).reshape(v["shape"]) for k, v in payload["weights"].items()}
    )
    h = payload["history"]
    model.history_ = TrainHistory(h["analysis_loss"], h["assessment_loss"], h["best_epoch"])
    model.n_features_in_ = len(model._columns())
    return model
