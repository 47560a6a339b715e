"""PCA and t-SNE for inspecting learned embeddings, plus plot-data export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import NonFiniteError


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaResult:
    components: np.ndarray
    variances: np.ndarray
    proportions: np.ndarray
    mean: np.ndarray
    projected: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.proportions)


def pca(points, n_components: int | None = None) -> PcaResult:
    """Principal components from the SVD of the column-centered data.

    ``proportions`` are relative to the total variance, so they sum to one
    only when every component is kept.
    """
    X = check_array(points, dtype=float, ensure_min_samples=2)
    n, dim = X.shape
    limit = min(n - 1, dim)
    k = limit if n_components is None else int(n_components)
    if not 1 <= k <= limit:
        raise ValueError(f"n_components must be in [1, {limit}], got {k}")
    mean = X.mean(axis=0)
    centered = X - mean
    if not np.any(centered):
        raise ValueError("all points are identical")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s**2 / (n - 1)
    total = variances.sum()
    # fix the sign so the largest loading of each component is positive
    signs = np.sign(vt[np.arange(len(vt)), np.argmax(np.abs(vt), axis=1)])
    vt = vt * signs[:, None]
    components = vt[:k]
    return PcaResult(components, variances[:k], variances[:k] / total, mean, centered @ components.T)


class PCA(TransformerMixin, BaseEstimator):
    def __init__(self, n_components: int | None = 2):
        self.n_components = n_components

    def fit(self, X, y=None):
        res = pca(X, self.n_components)
        self.components_ = res.components
        self.explained_variance_ = res.variances
        self.explained_variance_ratio_ = res.proportions
        self.mean_ = res.mean
        self.n_features_in_ = res.components.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=float)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Y):
        check_is_fitted(self, "components_")
        return np.asarray(Y, dtype=float) @ self.components_ + self.mean_


# ---------------------------------------------------------------------------
# t-SNE


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _neighbor_distribution(dist: np.ndarray, sigma: float) -> tuple[np.ndarray, float]:
    """Gaussian neighbor probabilities and their perplexity for one point."""
    logits = -(dist - dist.min()) / (2.0 * sigma * sigma)
    p = np.exp(logits)
    p /= p.sum()
    nz = p > 0
    entropy = -np.sum(p[nz] * np.log2(p[nz]))
    return p, 2.0**entropy


@dataclass
class PerplexityFit:
    sigma: float
    perplexity: float
    converged: bool


def perplexity_search(distances: np.ndarray, target: float, n_iter: int = 50, rtol: float = 1e-3) -> PerplexityFit:
    """Bandwidth whose neighbor distribution has the target perplexity.

    ``distances`` are squared distances from one point to every other point.
    The upper bracket doubles until it overshoots, then the bracket is
    bisected. When the target cannot be reached the bracket midpoint is
    returned with ``converged=False``.
    """
    d = np.asarray(distances, dtype=float)
    if d.size < 2:
        raise ValueError("perplexity search needs at least two neighbors")
    if not 1.0 < target < d.size + 1:
        raise ValueError(f"perplexity must be in (1, {d.size + 1}), got {target}")
    spread = np.sqrt(np.median(d[d > 0])) if np.any(d > 0) else 1.0
    lo, hi = 0.0, spread
    for _ in range(64):
        _, perp = _neighbor_distribution(d, hi)
        if perp >= target:
            break
        lo, hi = hi, 2.0 * hi
    sigma = hi
    for _ in range(n_iter):
        _, perp = _neighbor_distribution(d, sigma)
        if abs(perp - target) < rtol * target:
            return PerplexityFit(sigma, perp, True)
        if perp > target:
            hi = sigma
        else:
            lo = sigma
        sigma = 0.5 * (lo + hi)
    _, perp = _neighbor_distribution(d, sigma)
    return PerplexityFit(sigma, perp, abs(perp - target) < rtol * target)


def joint_probabilities(X: np.ndarray, perplexity: float) -> tuple[np.ndarray, list[PerplexityFit]]:
    """Symmetrized affinities ``(P + P^T) / 2n`` with a zero diagonal."""
    D = squared_distances(X)
    n = len(X)
    P = np.zeros((n, n))
    fits = []
    for i in range(n):
        others = np.r_[0:i, i + 1 : n]
        fit = perplexity_search(D[i, others], perplexity)
        P[i, others], _ = _neighbor_distribution(D[i, others], fit.sigma)
        fits.append(fit)
    return (P + P.T) / (2.0 * n), fits


def student_affinities(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cauchy-kernel joint similarities and the unnormalized kernel."""
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], np.finfo(float).tiny))))


@dataclass
class TsneConfig:
    perplexity: float = 5.0
    learning_rate: float = 100.0
    n_steps: int = 10_000
    n_components: int = 2
    seed: int = 0
    record_every: int = 50
    init_scale: float = 1e-4
    early_exaggeration: float = 1.0
    exaggeration_steps: int = 0
    momentum: float = 0.0

    def validate(self, n_points: int) -> None:
        if n_points < 4:
            raise ValueError("t-SNE needs at least 4 points")
        if not 1.0 < self.perplexity < n_points:
            raise ValueError(f"perplexity must be in (1, {n_points}), got {self.perplexity}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_steps: list[int]
    kl_trace: list[float]
    sigmas: np.ndarray
    perplexities: np.ndarray
    unconverged: list[int] = field(default_factory=list)

    @property
    def initial_kl(self) -> float:
        return self.kl_trace[0]

    @property
    def final_kl(self) -> float:
        return self.kl_trace[-1]


def tsne(points, config: TsneConfig | None = None) -> TsneResult:
    """Plain gradient descent on ``KL(P || Q)`` from a small Gaussian start."""
    config = config or TsneConfig()
    X = check_array(points, dtype=float)
    n = len(X)
    config.validate(n)
    P, fits = joint_probabilities(X, config.perplexity)
    rng = np.random.default_rng(config.seed)
    Y = rng.normal(0.0, config.init_scale, size=(n, config.n_components))
    velocity = np.zeros_like(Y)
    steps, trace = [], []
    for step in range(config.n_steps + 1):
        Q, num = student_affinities(Y)
        if step % config.record_every == 0 or step == config.n_steps:
            steps.append(step)
            trace.append(kl_divergence(P, Q))
        if step == config.n_steps:
            break
        target = P * config.early_exaggeration if step < config.exaggeration_steps else P
        W = (target - Q) * num
        grad = 4.0 * (np.sum(W, axis=1)[:, None] * Y - W @ Y)
        velocity = config.momentum * velocity - config.learning_rate * grad
        Y = Y + velocity
        if not np.all(np.isfinite(Y)):
            raise NonFiniteError(f"t-SNE produced non-finite coordinates at step {step + 1}")
    return TsneResult(
        Y,
        steps,
        trace,
        np.array([f.sigma for f in fits]),
        np.array([f.perplexity for f in fits]),
        [i for i, f in enumerate(fits) if not f.converged],
    )


class TSNE(BaseEstimator):
    def __init__(
        self,
        n_components: int = 2,
        perplexity: float = 5.0,
        learning_rate: float = 100.0,
        n_steps: int = 10_000,
        early_exaggeration: float = 1.0,
        exaggeration_steps: int = 0,
        momentum: float = 0.0,
        random_state: int = 0,
    ):
        self.n_components = n_components
        self.perplexity = perplexity
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.early_exaggeration = early_exaggeration
        self.exaggeration_steps = exaggeration_steps
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X, y=None):
        config = TsneConfig(
            perplexity=self.perplexity,
            learning_rate=self.learning_rate,
            n_steps=self.n_steps,
            n_components=self.n_components,
            seed=self.random_state,
            early_exaggeration=self.early_exaggeration,
            exaggeration_steps=self.exaggeration_steps,
            momentum=self.momentum,
        )
        self.result_ = tsne(X, config)
        self.embedding_ = self.result_.embedding
        self.kl_divergence_ = self.result_.final_kl
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_


# ---------------------------------------------------------------------------
# plot data


def export_plot_data(coords, labels: Sequence[str], csv_path, svg_path=None, groups: Sequence[str] | None = None, title: str = "") -> None:
    """Write ``label, x, y[, group]`` rows and optionally a labelled SVG scatter.

    One-dimensional coordinates are drawn on a number line. With ``groups``
    the SVG gets one panel per group.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim == 1:
        coords = coords[:, None]
    labels = [str(v) for v in labels]
    if len(labels) != len(coords):
        raise ValueError(f"{len(labels)} labels for {len(coords)} points")
    if groups is not None and len(groups) != len(coords):
        raise ValueError(f"{len(groups)} groups for {len(coords)} points")
    one_d = coords.shape[1] == 1
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "x", "y", *(["group"] if groups is not None else [])])
        for i, label in enumerate(labels):
            y = 0.0 if one_d else coords[i, 1]
            w.writerow([label, repr(float(coords[i, 0])), repr(float(y)), *([groups[i]] if groups is not None else [])])
    if svg_path is not None:
        with open(svg_path, "w") as fh:
            fh.write(render_svg(coords, labels, groups, title))


def render_svg(coords: np.ndarray, labels: Sequence[str], groups=None, title: str = "") -> str:
    panels = [("", np.arange(len(labels)))] if groups is None else [
        (g, np.flatnonzero(np.asarray(groups) == g)) for g in sorted(set(groups))
    ]
    one_d = coords.shape[1] == 1
    pw, ph, pad = 320, (120 if one_d else 320), 30
    ncol = min(len(panels), 3)
    nrow = math.ceil(len(panels) / ncol)
    width, height = ncol * pw, nrow * ph + 30
    x_all = coords[:, 0]
    y_all = np.zeros(len(coords)) if one_d else coords[:, 1]

    def scale(v, lo, hi, a, b):
        return (a + b) / 2 if hi == lo else a + (v - lo) / (hi - lo) * (b - a)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">',
        f'<text x="10" y="18" font-size="13">{escape(title)}</text>',
    ]
    for k, (name, idx) in enumerate(panels):
        ox, oy = (k % ncol) * pw, 30 + (k // ncol) * ph
        out.append(f'<rect x="{ox + 2}" y="{oy}" width="{pw - 4}" height="{ph - 4}" fill="none" stroke="#ccc"/>')
        if name:
            out.append(f'<text x="{ox + 8}" y="{oy + 14}" font-size="12">{escape(name)}</text>')
        xs, ys = x_all[idx], y_all[idx]
        lo_x, hi_x = (xs.min(), xs.max()) if len(idx) else (0.0, 1.0)
        lo_y, hi_y = (ys.min(), ys.max()) if len(idx) else (0.0, 1.0)
        if one_d:
            mid = oy + ph / 2
            out.append(f'<line x1="{ox + pad}" y1="{mid}" x2="{ox + pw - pad}" y2="{mid}" stroke="#444"/>')
        for j, i in enumerate(idx):
            px = scale(x_all[i], lo_x, hi_x, ox + pad, ox + pw - pad)
            if one_d:
                py = oy + ph / 2
                ty = py - 6 - 10 * (j % 3)
            else:
                py = scale(y_all[i], lo_y, hi_y, oy + ph - pad, oy + pad)
                ty = py - 4
            out.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="#1f77b4"/>')
            out.append(f'<text x="{px + 4:.2f}" y="{ty:.2f}">{escape(labels[i])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
