"""Input checks shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import pandas as pd


def check_frame(X, columns: Sequence[str]) -> pd.DataFrame:
    """Return ``X`` as a DataFrame, raising if any of ``columns`` is absent."""
    if not isinstance(X, pd.DataFrame):
        if hasattr(X, "frame") and isinstance(X.frame, pd.DataFrame):
            X = X.frame
        else:
            X = pd.DataFrame(X)
    missing = [c for c in columns if c not in X.columns]
    if missing:
        raise KeyError(f"columns missing from input: {missing}")
    if len(X) == 0:
        raise ValueError("empty input")
    return X


def check_response(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if len(y) != n_rows:
        raise ValueError(f"response has {len(y)} rows, expected {n_rows}")
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite values")
    return y


def check_exposure(values) -> np.ndarray:
    e = np.asarray(values, dtype=float).ravel()
    if np.any(~np.isfinite(e)) or np.any(e <= 0):
        raise ValueError("exposure must be finite and strictly positive")
    return e


def check_same_length(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("empty input")
    return a, b
