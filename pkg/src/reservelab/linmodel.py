"""Least squares on clustered data, at payment (micro) and cluster (macro) level.

The two fits are algebraically equivalent: regressing every individual
response on its cluster's covariates gives the same coefficients as
regressing cluster means with the cluster sizes as weights, and the same
holds for coefficient covariances once the macro error variance is scaled
by 1/n_g. This module exists to make that equivalence executable; it also
provides the weighted least-squares kernel reused by the GLM solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularDesignError

# Designs with a worse condition estimate than this are treated as singular.
MAX_CONDITION = 1e12


def solve_weighted_least_squares(X, y, weights=None):
    """Minimize sum of weights * (y - X b)^2 via an SVD-based solve.

    Returns the coefficient vector. Raises :class:`SingularDesignError` when
    the (weighted) design is rank deficient or its condition estimate
    exceeds ``MAX_CONDITION``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if weights is not None:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        Xw = X * sw[:, None]
        yw = y * sw
    else:
        Xw, yw = X, y
    coef, _, rank, svals = np.linalg.lstsq(Xw, yw, rcond=None)
    p = X.shape[1]
    if rank < p or svals[0] > MAX_CONDITION * svals[-1]:
        raise SingularDesignError(
            f"design is rank deficient or ill conditioned (rank {rank} of {p})"
        )
    return coef


@dataclass(frozen=True)
class ClusteredLinearData:
    """Responses grouped into clusters that share one covariate vector.

    Parameters
    ----------
    design : ndarray of shape (m, k+1)
        One covariate row per cluster; the first column must be the
        intercept column of ones.
    responses : tuple of ndarray
        Per-cluster response vectors, each of length n_g >= 1.
    """

    design: np.ndarray
    responses: tuple

    def __post_init__(self):
        design = np.array(self.design, dtype=float)
        if design.ndim != 2:
            raise ValueError("design must be a 2-d array (one row per cluster)")
        if not np.all(design[:, 0] == 1.0):
            raise ValueError("first design column must be the intercept (all ones)")
        responses = tuple(np.array(r, dtype=float).ravel() for r in self.responses)
        if len(responses) != design.shape[0]:
            raise ValueError("need one response vector per cluster")
        if any(r.size < 1 for r in responses):
            raise ValueError("every cluster needs at least one response")
        design.setflags(write=False)
        for r in responses:
            r.setflags(write=False)
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "responses", responses)

    @property
    def n_clusters(self) -> int:
        return self.design.shape[0]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([r.size for r in self.responses])

    @property
    def n_rows(self) -> int:
        return int(self.cluster_sizes.sum())

    def stacked(self):
        """Row-level design and response (cluster rows repeated n_g times)."""
        sizes = self.cluster_sizes
        X = np.repeat(self.design, sizes, axis=0)
        y = np.concatenate(self.responses)
        return X, y

    def cluster_means(self) -> np.ndarray:
        return np.array([r.mean() for r in self.responses])


@dataclass(frozen=True)
class LinearFit:
    """A least-squares fit together with what is needed for its covariance.

    ``normal_matrix`` is X'X for the micro fit and X'diag(n_g)X for the
    weighted macro fit; the coefficient covariance is
    ``sigma2 * inv(normal_matrix)`` in both cases.
    """

    coef: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    sigma2: float
    normal_matrix: np.ndarray
    level: str  # "micro" or "macro"


def fit_ols_micro(data: ClusteredLinearData) -> LinearFit:
    """Ordinary least squares on the individual (payment-level) rows."""
    X, y = data.stacked()
    coef = solve_weighted_least_squares(X, y)
    fitted = X @ coef
    residuals = y - fitted
    dof = X.shape[0] - X.shape[1]
    sigma2 = float(residuals @ residuals / dof) if dof > 0 else float("nan")
    return LinearFit(coef, fitted, residuals, sigma2, X.T @ X, "micro")


def fit_wls_macro(data: ClusteredLinearData) -> LinearFit:
    """Weighted least squares on cluster means, weights n_g.

    The coefficient vector equals :func:`fit_ols_micro` on the same data;
    fitted values and residuals are at the cluster level.
    """
    X = data.design
    ybar = data.cluster_means()
    n_g = data.cluster_sizes.astype(float)
    coef = solve_weighted_least_squares(X, ybar, weights=n_g)
    fitted = X @ coef
    residuals = ybar - fitted
    dof = X.shape[0] - X.shape[1]
    # Var(e_g) = sigma^2 / n_g, so n_g-weighted squared residuals estimate sigma^2.
    sigma2 = float((n_g * residuals**2).sum() / dof) if dof > 0 else float("nan")
    normal = (X * n_g[:, None]).T @ X
    return LinearFit(coef, fitted, residuals, sigma2, normal, "macro")


def coefficient_covariance(fit: LinearFit, sigma2: float | None = None) -> np.ndarray:
    """Covariance of the coefficient estimator, ``sigma2 * inv(normal_matrix)``.

    With the same row variance ``sigma2``, the micro and macro fits of one
    dataset return the same matrix (the normal matrices coincide).
    """
    if sigma2 is None:
        sigma2 = fit.sigma2
    return sigma2 * np.linalg.inv(fit.normal_matrix)


def prediction_sum(fit: LinearFit, data: ClusteredLinearData) -> float:
    """Sum of predicted responses over all individual rows.

    For the macro fit each cluster prediction is counted n_g times, which
    is the same total as the micro fit produces.
    """
    n_g = data.cluster_sizes.astype(float)
    return float(n_g @ (data.design @ fit.coef))
