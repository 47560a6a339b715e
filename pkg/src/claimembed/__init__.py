"""Claim-severity models with categorical embeddings, attention and GLMs."""

from .attention import SimpleAttentionRegressor, TabTransformerRegressor
from .data import Dataset, load_csv, make_splits, nfip_schema
from .glm import GlmRegressor, LinearBenchmark
from .nets import EmbeddingNetRegressor

__all__ = [
    "Dataset",
    "EmbeddingNetRegressor",
    "GlmRegressor",
    "LinearBenchmark",
    "SimpleAttentionRegressor",
    "TabTransformerRegressor",
    "load_csv",
    "make_splits",
    "nfip_schema",
]

__version__ = "0.1.0"
