"""Conjugate exponential-family primitives used by every block.

Two conjugate pairs only: categorical/Dirichlet for the discrete side and
Gaussian/Normal-Inverse-Wishart for the continuous side.  Everything is
value-semantic: operations return new objects and never mutate inputs, so
they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .errors import ConfigError, ShapeError

JITTER = 1e-9
DEFAULT_PRIOR_COUNT = 0.1


def _as_float_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class CategoricalBelief:
    """A normalized distribution over K categories."""

    probs: np.ndarray

    def __post_init__(self):
        p = _as_float_array(self.probs)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or p.size < 1:
            raise ShapeError("belief must be a non-empty vector")
        if np.any(p < -1e-12):
            raise ConfigError("belief has negative entries")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ConfigError(f"belief does not sum to 1 (sum={p.sum()!r})")

    @property
    def num_categories(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class DirichletCounts:
    """Pseudo-counts parameterizing a conditional probability table.

    Axis 0 indexes the random variable; any trailing axes are conditioning
    variables, so every axis-0 slice ("column") is one Dirichlet.
    """

    counts: np.ndarray

    def __post_init__(self):
        c = _as_float_array(self.counts)
        object.__setattr__(self, "counts", c)
        if c.ndim < 1:
            raise ShapeError("counts must have at least one axis")
        if np.any(c <= 0):
            raise ConfigError("all pseudo-counts must be positive")

    @classmethod
    def uniform(cls, shape, prior: float = DEFAULT_PRIOR_COUNT) -> "DirichletCounts":
        return cls(np.full(shape, float(prior)))

    def mean(self) -> np.ndarray:
        """Expected probability table: counts normalized over axis 0."""
        return self.counts / self.counts.sum(axis=0, keepdims=True)

    def added(self, delta: np.ndarray) -> "DirichletCounts":
        d = _as_float_array(delta)
        if d.shape != self.counts.shape:
            raise ShapeError("count increment shape mismatch")
        if np.any(d < -1e-12):
            raise ConfigError("count increments must be nonnegative")
        return DirichletCounts(self.counts + np.maximum(d, 0.0))


@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian posterior with mean and positive-definite covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = _as_float_array(self.mean)
        c = _as_float_array(self.covariance)
        if m.ndim != 1 or c.shape != (m.size, m.size):
            raise ShapeError("mean/covariance shapes inconsistent")
        if np.max(np.abs(c - c.T), initial=0.0) > 1e-9:
            raise ConfigError("covariance not symmetric")
        c = 0.5 * (c + c.T) + JITTER * np.eye(m.size)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", c)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class NiwParams:
    """Normal-Inverse-Wishart belief over a Gaussian's (mean, covariance).

    Fields follow the standard parameterization: prior mean, scale kappa
    (pseudo-observations of the mean), degrees of freedom, and scatter.
    """

    mean: np.ndarray
    scale: float
    dof: float
    scatter: np.ndarray

    def __post_init__(self):
        m = _as_float_array(self.mean)
        s = _as_float_array(self.scatter)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "scatter", 0.5 * (s + s.T))
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "dof", float(self.dof))
        d = m.size
        if s.shape != (d, d):
            raise ShapeError("scatter shape mismatch")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if self.dof <= d - 1:
            raise ConfigError("dof must exceed dim - 1")
        try:
            np.linalg.cholesky(self.scatter + JITTER * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise ConfigError("scatter must be positive-definite") from exc

    @property
    def dim(self) -> int:
        return self.mean.size


def categorical_entropy(belief: CategoricalBelief) -> float:
    """Shannon entropy in nats, with 0*log(0) taken as 0."""
    p = belief.probs
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def dirichlet_expected_log(counts: DirichletCounts) -> np.ndarray:
    """E[log p] under each Dirichlet column: digamma(c) - digamma(sum c)."""
    c = counts.counts
    return digamma(c) - digamma(c.sum(axis=0, keepdims=True))


def gaussian_log_predictive(x, params: NiwParams) -> float:
    """Log posterior-predictive density of x under a NIW belief.

    The predictive is a multivariate Student-t with dof - dim + 1 degrees
    of freedom centered at the prior mean; this is the score the growth
    rule compares when deciding whether a datum warrants a new component.
    """
    x = _as_float_array(x)
    d = params.dim
    if x.shape != (d,):
        raise ShapeError(f"datum has shape {x.shape}, expected ({d},)")
    nu = params.dof - d + 1.0
    scale_mat = params.scatter * (params.scale + 1.0) / (params.scale * nu)
    chol = np.linalg.cholesky(scale_mat + JITTER * np.eye(d))
    dev = np.linalg.solve(chol, x - params.mean)
    maha = float(dev @ dev)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return float(
        gammaln(0.5 * (nu + d))
        - gammaln(0.5 * nu)
        - 0.5 * d * np.log(nu * np.pi)
        - 0.5 * logdet
        - 0.5 * (nu + d) * np.log1p(maha / nu)
    )


def niw_update(params: NiwParams, xs, weights=None) -> NiwParams:
    """Conjugate update with a (weighted) batch of observations.

    A zero-weight batch is an exact no-op; batches are order-independent
    and splitting a batch in two gives the same posterior as one pass.
    """
    xs = np.atleast_2d(_as_float_array(xs))
    if xs.shape[1] != params.dim:
        raise ShapeError("data dimension mismatch")
    if weights is None:
        w = np.ones(xs.shape[0])
    else:
        w = _as_float_array(weights)
        if w.shape != (xs.shape[0],):
            raise ShapeError("weights length mismatch")
        if np.any(w < 0):
            raise ConfigError("weights must be nonnegative")
    n = float(w.sum())
    if n == 0.0:
        return params
    xbar = (w[:, None] * xs).sum(axis=0) / n
    centered = xs - xbar
    scatter = (w[:, None] * centered).T @ centered
    kappa = params.scale + n
    delta = xbar - params.mean
    return NiwParams(
        mean=(params.scale * params.mean + n * xbar) / kappa,
        scale=kappa,
        dof=params.dof + n,
        scatter=params.scatter + scatter + (params.scale * n / kappa) * np.outer(delta, delta),
    )


def dirichlet_kl(posterior: np.ndarray, prior: np.ndarray) -> float:
    """KL(Dir(posterior) || Dir(prior)) summed over all columns.

    Both arguments are count arrays with the variable on axis 0.
    """
    q = _as_float_array(posterior)
    p = _as_float_array(prior)
    if q.shape != p.shape:
        raise ShapeError("count table shapes differ")
    q0 = q.sum(axis=0)
    p0 = p.sum(axis=0)
    term = (
        gammaln(q0)
        - gammaln(p0)
        + np.sum(gammaln(p) - gammaln(q), axis=0)
        + np.sum((q - p) * (digamma(q) - digamma(q0)), axis=0)
    )
    return float(np.sum(term))
