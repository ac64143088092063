"""Linear discriminant analysis with a probabilistic read-out.

Samples are stored column-wise (``m`` features x ``n`` samples).  The
projection solves the generalized problem ``S_B v = lambda S_W' v`` with
``S_W' = S_W + gamma * (tr S_W / m) * I``: Cholesky-reduce ``S_W'`` and
diagonalize the small ``c x c`` Gram matrix of the whitened class-mean
deviations, which carries every nonzero eigenpair since ``rank S_B <= c-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NotPositiveDefiniteError, NumericalError, ShapeError
from .linalg import SymmetricMatrix, cholesky, symmetric_eig, triangular_solve

DEFAULT_GAMMA = 1e-4


def default_dim(num_classes: int) -> int:
    """Discriminant dimension used when none is configured: 1 for two classes, else 2."""
    return 1 if num_classes <= 2 else 2


@dataclass
class DatasetView:
    samples: np.ndarray      # (m, n)
    labels: np.ndarray       # (n,)
    num_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.samples.ndim != 2:
            raise ShapeError(f"samples must be (m, n), got {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[1],):
            raise ShapeError(f"{self.labels.shape[0]} labels for {self.samples.shape[1]} samples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        empty = np.flatnonzero(self.counts == 0)
        if empty.size:
            raise ContractError(f"class {empty[0]} has no samples")

    @classmethod
    def from_rows(cls, rows, labels, num_classes: int) -> "DatasetView":
        """Build from a ``(n, ...)`` batch; each sample is flattened to one column."""
        rows = np.asarray(rows)
        return cls(rows.reshape(rows.shape[0], -1).T, labels, num_classes)

    @property
    def m(self) -> int:
        return self.samples.shape[0]

    @property
    def n(self) -> int:
        return self.samples.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class ScatterPair:
    within: SymmetricMatrix
    between: SymmetricMatrix
    mean: np.ndarray
    class_means: np.ndarray  # (c, m)
    counts: np.ndarray
    between_factor: np.ndarray  # (m, c), between = F @ F.T


@dataclass
class LdaModel:
    projection: np.ndarray   # (m, d)
    eigenvalues: np.ndarray  # (d,)
    centroids: np.ndarray    # (c, d), projected class means
    priors: np.ndarray       # (c,)
    gamma: float
    # distances are measured after scaling by this factor so the pooled
    # within-class spread of projected samples is ~1
    scale: float = 1.0

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]


def class_statistics(data: DatasetView):
    """Global mean, per-class means ``(c, m)`` and per-class counts.

    The global mean is formed as ``sum_j n_j mu_j / n`` in 64-bit.
    """
    counts = data.counts
    sums = np.zeros((data.num_classes, data.m))
    np.add.at(sums, data.labels, data.samples.T)
    means = sums / counts[:, None]
    mu = (counts[:, None] * means).sum(axis=0) / data.n
    return mu, means, counts


def scatter_matrices(data: DatasetView) -> ScatterPair:
    mu, means, counts = class_statistics(data)
    centered = data.samples - means[data.labels].T
    within = centered @ centered.T
    factor = (means - mu).T * np.sqrt(counts)[None, :]
    between = factor @ factor.T
    return ScatterPair(
        SymmetricMatrix.from_dense(within),
        SymmetricMatrix.from_dense(between),
        mu, means, counts, factor,
    )


def regularized_within(pair: ScatterPair, gamma: float) -> SymmetricMatrix:
    m = pair.within.order
    shift = gamma * pair.within.trace() / m
    return pair.within + SymmetricMatrix.identity(m).scaled(shift)


def fit_lda(data: DatasetView, d: int, gamma: float = DEFAULT_GAMMA) -> LdaModel:
    """Top-`d` discriminant directions, normalized so ``v^T S_W' v = 1``."""
    c = data.num_classes
    if not 1 <= d <= c - 1:
        raise ContractError(f"discriminant dimension d={d} must satisfy 1 <= d <= c-1 = {c - 1}")
    pair = scatter_matrices(data)
    try:
        chol = cholesky(regularized_within(pair, gamma))
    except NotPositiveDefiniteError as exc:
        raise NumericalError(f"regularized within-class scatter is singular ({exc})") from exc
    white = triangular_solve(chol, pair.between_factor)      # L^-1 F, (m, c)
    lam, u = symmetric_eig(white.T @ white)
    lam, u = lam[:d], u[:, :d]
    tiny = 1e-12 * max(float(lam[0]), 1.0) if lam.size else 0.0
    if np.any(lam <= tiny):
        raise NumericalError(f"between-class scatter has rank < d={d}")
    w = white @ u / np.sqrt(lam)
    v = triangular_solve(chol, w, transpose=True)
    return LdaModel(
        projection=v,
        eigenvalues=lam,
        centroids=pair.class_means @ v,
        priors=pair.counts / data.n,
        gamma=gamma,
        scale=math.sqrt(max(data.n - c, 1)),
    )


def project(model: LdaModel, x) -> np.ndarray:
    """``z = V^T x`` for one sample ``(m,)`` or a batch ``(n, ...)``."""
    x = np.asarray(x, dtype=np.float64)
    m = model.projection.shape[0]
    if x.ndim == 1:
        if x.shape[0] != m:
            raise ShapeError(f"sample has {x.shape[0]} features, model expects {m}")
        return x @ model.projection
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != m:
        raise ShapeError(f"samples have {flat.shape[1]} features, model expects {m}")
    return flat @ model.projection


def proba_from_projection(model: LdaModel, z) -> np.ndarray:
    """Class probabilities ``p_j ~ prior_j * exp(-0.5 * ||s (z - c_j)||^2)``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    diff = (z[:, None, :] - model.centroids[None, :, :]) * model.scale
    logits = np.log(model.priors)[None, :] - 0.5 * np.sum(diff * diff, axis=2)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def predict_proba(model: LdaModel, x) -> np.ndarray:
    x = np.asarray(x)
    p = proba_from_projection(model, project(model, x))
    return p[0] if x.ndim == 1 else p


def trace_ratio(v, between, within) -> float:
    """``Tr(V^T S_B V) / Tr(V^T S_W V)``."""
    v = np.asarray(v, dtype=np.float64)
    sb = between.to_dense() if isinstance(between, SymmetricMatrix) else np.asarray(between)
    sw = within.to_dense() if isinstance(within, SymmetricMatrix) else np.asarray(within)
    return float(np.trace(v.T @ sb @ v) / np.trace(v.T @ sw @ v))
