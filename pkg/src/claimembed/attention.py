"""Scaled dot-product self-attention over categorical embeddings.

Two severity networks build on it: a simple attention network that mixes the
stacked embeddings once before the dense head, and a TabTransformer that adds
a column-identifier embedding and runs Transformer blocks. The Transformer
output rows are the contextual embeddings.
"""

from __future__ import annotations

import csv
import math
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .nets import Batch, NeuralSeverityRegressor, dense_head, init_embedding, init_head, lookup
from .validation import check_frame


def attention_scores(Q, K, d: int | None = None) -> ad.Tensor:
    """``Q K^T / sqrt(d)`` for ``(q, d)`` or batched ``(B, q, d)`` inputs."""
    Q, K = ad.as_tensor(Q), ad.as_tensor(K)
    if Q.shape != K.shape:
        raise ValueError(f"Q and K shapes differ: {Q.shape} vs {K.shape}")
    d = Q.shape[-1] if d is None else d
    return ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(d))


def attention_apply(A, values) -> ad.Tensor:
    """Row-softmax the scores and mix the value rows."""
    A, values = ad.as_tensor(A), ad.as_tensor(values)
    q = values.shape[-2]
    if A.shape[-1] != q or A.shape[-2] != q:
        raise ValueError(f"score matrix {A.shape} does not match {q} value rows")
    return ad.matmul(ad.softmax_rows(A), values)


def self_attention(x: ad.Tensor, wq, wk, wv=None, n_heads: int = 1) -> ad.Tensor:
    """Self-attention on ``x`` of shape ``(B, q, d)``; identity values when ``wv`` is None."""
    Q, K = x @ wq, x @ wk
    V = x if wv is None else x @ wv
    if n_heads == 1:
        return attention_apply(attention_scores(Q, K), V)
    B, q, d = x.shape
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(t):
        return ad.permute(ad.reshape(t, (B, q, n_heads, dh)), (0, 2, 1, 3))

    mixed = attention_apply(attention_scores(split(Q), split(K)), split(V))
    return ad.reshape(ad.permute(mixed, (0, 2, 1, 3)), (B, q, d))


def transformer_block(params: ad.ParameterSet, prefix: str, x: ad.Tensor, training, rng, dropout_rate, n_heads=1):
    """``H = LN(x + drop(attn(x)))``; ``out = LN(H + drop(FFN(H)))``."""
    wv = params[f"{prefix}.wv"] if f"{prefix}.wv" in params else None
    att = self_attention(x, params[f"{prefix}.wq"], params[f"{prefix}.wk"], wv, n_heads)
    h = ad.layer_norm(x + ad.dropout(att, dropout_rate, rng, training), params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    ffn = ad.relu(h @ params[f"{prefix}.ffn.w1"] + params[f"{prefix}.ffn.b1"]) @ params[f"{prefix}.ffn.w2"] + params[f"{prefix}.ffn.b2"]
    return ad.layer_norm(h + ad.dropout(ffn, dropout_rate, rng, training), params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def init_transformer_block(params, rng, prefix: str, width: int, ffn_multiplier: int, value_projection: bool):
    params.add(f"{prefix}.wq", ad.glorot_uniform(rng, width, width))
    params.add(f"{prefix}.wk", ad.glorot_uniform(rng, width, width))
    if value_projection:
        params.add(f"{prefix}.wv", ad.glorot_uniform(rng, width, width))
    params.add(f"{prefix}.ln1.g", np.ones(width))
    params.add(f"{prefix}.ln1.b", np.zeros(width))
    inner = ffn_multiplier * width
    params.add(f"{prefix}.ffn.w1", ad.glorot_uniform(rng, width, inner))
    params.add(f"{prefix}.ffn.b1", np.zeros(inner))
    params.add(f"{prefix}.ffn.w2", ad.glorot_uniform(rng, inner, width))
    params.add(f"{prefix}.ffn.b2", np.zeros(width))
    params.add(f"{prefix}.ln2.g", np.ones(width))
    params.add(f"{prefix}.ln2.b", np.zeros(width))


class _StackedEmbeddingRegressor(NeuralSeverityRegressor):
    def _stacked(self, params, batch: Batch) -> ad.Tensor:
        return ad.stack([lookup(params, name, batch.cat[:, j]) for j, name in enumerate(self.categorical)], axis=1)

    def _init_embeddings(self, params, rng, cardinalities):
        for name in self.categorical:
            init_embedding(params, rng, name, cardinalities[name], self.embedding_dim)

    def _check_config(self):
        if not self.categorical:
            raise ValueError("attention models need at least one categorical column")
        if not isinstance(self.embedding_dim, (int, np.integer)):
            raise ValueError("attention models need one common integer embedding_dim")


class SimpleAttentionRegressor(_StackedEmbeddingRegressor):
    """Common-width embeddings, one self-attention layer, then the dense severity head.

    With ``attention=False`` the mixing step is the identity and the model is
    the multidimensional embedding network with a common width.
    """

    def __init__(
        self,
        numeric: Sequence[str] = (),
        categorical: Sequence[str] = (),
        exposure: str = "exposure",
        log_columns: Sequence[str] = (),
        embedding_dim: int = 16,
        hidden_units: int = 8,
        n_heads: int = 1,
        value_projection: bool = False,
        attention: bool = True,
        learning_rate: float = 0.001,
        batch_size: int = 1000,
        max_epochs: int = 150,
        patience: int = 10,
        validation_fraction: float = 0.2,
        dropout: float = 0.025,
        random_state: int = 0,
    ):
        self.numeric = numeric
        self.categorical = categorical
        self.exposure = exposure
        self.log_columns = log_columns
        self.embedding_dim = embedding_dim
        self.hidden_units = hidden_units
        self.n_heads = n_heads
        self.value_projection = value_projection
        self.attention = attention
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.dropout = dropout
        self.random_state = random_state

    def _init_params(self, rng, cardinalities, n_numeric, base_rate):
        self._check_config()
        params = ad.ParameterSet()
        self._init_embeddings(params, rng, cardinalities)
        d = self.embedding_dim
        if self.attention:
            params.add("att.wq", ad.glorot_uniform(rng, d, d))
            params.add("att.wk", ad.glorot_uniform(rng, d, d))
            if self.value_projection:
                params.add("att.wv", ad.glorot_uniform(rng, d, d))
        init_head(params, rng, len(self.categorical) * d + n_numeric, self.hidden_units, base_rate)
        return params

    def mixed(self, params, batch, training=False, rng=None) -> ad.Tensor:
        x = self._stacked(params, batch)
        if not self.attention:
            return x
        wv = params["att.wv"] if "att.wv" in params else None
        x = self_attention(x, params["att.wq"], params["att.wk"], wv, self.n_heads)
        return ad.dropout(x, self.dropout, rng, training)

    def _forward(self, params, batch, training, rng):
        x = self.mixed(params, batch, training, rng)
        flat = ad.reshape(x, (x.shape[0], -1))
        features = ad.concat([flat, ad.Tensor(batch.num)], axis=1)
        return dense_head(params, features, batch.exposure, training, rng, self.dropout)


class TabTransformerRegressor(_StackedEmbeddingRegressor):
    """Categorical embeddings plus column identifiers through Transformer blocks.

    Each variable's embedding (width ``embedding_dim``) is concatenated with a
    learned identifier of width ``column_dim``. Numerics bypass the
    Transformer and join the flattened contextual output at the dense head.
    """

    def __init__(
        self,
        numeric: Sequence[str] = (),
        categorical: Sequence[str] = (),
        exposure: str = "exposure",
        log_columns: Sequence[str] = (),
        embedding_dim: int = 16,
        column_dim: int = 4,
        depth: int = 1,
        n_heads: int = 1,
        ffn_multiplier: int = 4,
        value_projection: bool = False,
        hidden_units: int = 8,
        learning_rate: float = 0.001,
        batch_size: int = 1000,
        max_epochs: int = 150,
        patience: int = 10,
        validation_fraction: float = 0.2,
        dropout: float = 0.025,
        random_state: int = 0,
    ):
        self.numeric = numeric
        self.categorical = categorical
        self.exposure = exposure
        self.log_columns = log_columns
        self.embedding_dim = embedding_dim
        self.column_dim = column_dim
        self.depth = depth
        self.n_heads = n_heads
        self.ffn_multiplier = ffn_multiplier
        self.value_projection = value_projection
        self.hidden_units = hidden_units
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.dropout = dropout
        self.random_state = random_state

    @property
    def width(self) -> int:
        return self.embedding_dim + self.column_dim

    def _init_params(self, rng, cardinalities, n_numeric, base_rate):
        self._check_config()
        params = ad.ParameterSet()
        self._init_embeddings(params, rng, cardinalities)
        q = len(self.categorical)
        if self.column_dim:
            params.add("colid", ad.glorot_uniform(rng, q, self.column_dim))
        for layer in range(self.depth):
            init_transformer_block(params, rng, f"block{layer}", self.width, self.ffn_multiplier, self.value_projection)
        init_head(params, rng, q * self.width + n_numeric, self.hidden_units, base_rate)
        return params

    def augmented(self, params, batch) -> ad.Tensor:
        x = self._stacked(params, batch)
        if not self.column_dim:
            return x
        B, q = len(batch), len(self.categorical)
        ids = ad.broadcast_to(params["colid"], (B, q, self.column_dim))
        return ad.concat([x, ids], axis=2)

    def contextual(self, params, batch, training=False, rng=None) -> ad.Tensor:
        x = self.augmented(params, batch)
        for layer in range(self.depth):
            x = transformer_block(params, f"block{layer}", x, training, rng, self.dropout, self.n_heads)
        return x

    def _forward(self, params, batch, training, rng):
        x = self.contextual(params, batch, training, rng)
        flat = ad.reshape(x, (x.shape[0], -1))
        features = ad.concat([flat, ad.Tensor(batch.num)], axis=1)
        return dense_head(params, features, batch.exposure, training, rng, self.dropout)

    def extract_contextual(self, X: pd.DataFrame, variable: str) -> tuple[np.ndarray, np.ndarray]:
        """Static embedding rows and Transformer-output rows of ``variable`` per observation."""
        check_is_fitted(self, "params_")
        if variable not in self.categorical:
            raise ValueError(f"{variable!r} is not a categorical input of this model")
        X = check_frame(X, self._columns())
        j = list(self.categorical).index(variable)
        batch = self._batch(X)
        static, ctx = [], []
        for s in range(0, len(batch), 20000):
            b = batch.take(slice(s, s + 20000))
            static.append(self.params_[f"emb:{variable}"].data[b.cat[:, j]])
            ctx.append(self.contextual(self.params_, b).data[:, j, :])
        return np.concatenate(static), np.concatenate(ctx)


def export_contextual(static: np.ndarray, contextual: np.ndarray, path, observation_ids=None) -> None:
    """Paired CSV rows ``observation_id, kind, e1..ek`` with kind static/contextual."""
    n = len(static)
    ids = np.arange(n) if observation_ids is None else np.asarray(observation_ids)
    width = max(static.shape[1], contextual.shape[1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observation_id", "kind", *(f"e{k + 1}" for k in range(width))])
        for kind, block in (("static", static), ("contextual", contextual)):
            pad = [""] * (width - block.shape[1])
            for i, row in zip(ids, block):
                w.writerow([i, kind, *(repr(float(v)) for v in row), *pad])
