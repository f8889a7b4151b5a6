"""Cross-classified Poisson and quasi-Poisson regression with offsets.

The solver is iteratively reweighted least squares with a log link. The
quasi-Poisson family shares the Poisson score equations (the quasi-score
drops the dispersion factor), so both families produce identical
coefficients; they differ only in the dispersion used for the coefficient
covariance. Step halving keeps the deviance non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from .errors import ConvergenceError, DegenerateFitError
from .linmodel import solve_weighted_least_squares

POISSON = "poisson"
QUASIPOISSON = "quasipoisson"

# Fitted means below this are treated as degenerate zeros.
_MU_FLOOR = 1e-290


def poisson_deviance(y, mu) -> float:
    """Poisson deviance 2 sum[y log(y/mu) - (y - mu)] (0 log 0 = 0)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return float(2.0 * np.sum(xlogy(y, y / np.maximum(mu, _MU_FLOOR)) - (y - mu)))


def poisson_loglik(y, mu) -> float:
    """Poisson log-likelihood sum[y log mu - mu - log y!]."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return float(np.sum(xlogy(y, mu) - mu - gammaln(y + 1.0)))


@dataclass(frozen=True)
class GlmSpec:
    """A (quasi-)Poisson regression problem: response, design, offsets.

    Parameters
    ----------
    y : ndarray of shape (n,)
        Non-negative responses (counts or amounts).
    X : ndarray of shape (n, p)
        Design rows.
    offset : ndarray of shape (n,), optional
        Log-scale offsets; zeros when omitted.
    family : str
        ``"poisson"`` or ``"quasipoisson"``.
    """

    y: np.ndarray
    X: np.ndarray
    offset: np.ndarray | None = None
    family: str = POISSON

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        X = np.array(self.X, dtype=float)
        if X.ndim != 2:
            raise ValueError("design must be 2-d")
        if X.shape[0] != y.size:
            raise ValueError(f"{y.size} responses but {X.shape[0]} design rows")
        if X.shape[0] < X.shape[1]:
            raise ValueError("need at least as many rows as parameters")
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise ValueError("responses must be finite and non-negative")
        offset = self.offset
        offset = np.zeros(y.size) if offset is None else np.array(offset, dtype=float).ravel()
        if offset.size != y.size:
            raise ValueError("offset length does not match responses")
        if not np.all(np.isfinite(offset)):
            raise ValueError("offsets must be finite")
        if self.family not in (POISSON, QUASIPOISSON):
            raise ValueError(f"unknown family: {self.family!r}")
        for arr in (y, X, offset):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "offset", offset)

    @property
    def n_rows(self) -> int:
        return self.y.size

    @property
    def n_params(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class GlmFit:
    """A converged (quasi-)Poisson fit.

    ``dispersion`` is the Pearson estimate with the default ``n - p``
    degrees of freedom; ``covariance`` already folds in the family rule
    (Poisson uses dispersion 1, quasi-Poisson uses the Pearson estimate).
    """

    spec: GlmSpec
    coef: np.ndarray
    fitted: np.ndarray
    deviance: float
    deviance_trace: tuple
    pearson_statistic: float
    dispersion: float
    covariance: np.ndarray
    converged: bool
    n_iter: int

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def covariance_dispersion(self) -> float:
        return 1.0 if self.family == POISSON else self.dispersion

    def information(self) -> np.ndarray:
        """Unscaled Fisher information X' diag(fitted) X at the optimum."""
        X = self.spec.X
        return (X * self.fitted[:, None]).T @ X

    def loglik(self) -> float:
        return poisson_loglik(self.spec.y, self.fitted)

    def predict(self, X, offset=None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        eta = X @ self.coef
        if offset is not None:
            eta = eta + np.asarray(offset, dtype=float)
        return np.exp(eta)


def fit_glm(spec: GlmSpec, max_iter: int = 50, tol: float = 1e-10) -> GlmFit:
    """Fit a (quasi-)Poisson log-link regression by IRLS.

    Starts from the constant rate matching the total response over the
    total exposure, then iterates weighted least squares with step halving
    so the deviance never increases. Convergence requires both a relative
    deviance change below ``tol`` and score equations satisfied to
    ``1e-8 * sum(y)``.

    Raises
    ------
    ConvergenceError
        If the tolerances are not met within ``max_iter`` iterations; the
        exception carries the last coefficient vector.
    SingularDesignError
        If the working design is rank deficient at any iteration.
    """
    y, X, offset = spec.y, spec.X, spec.offset
    total = y.sum()
    if total <= 0:
        raise DegenerateFitError("responses sum to zero; the log-link mean is unbounded below")
    score_tol = 1e-8 * total

    eta = offset + np.log(total / np.exp(offset).sum())
    beta = None
    deviance = poisson_deviance(y, np.exp(eta))
    trace = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        mu = np.maximum(np.exp(eta), _MU_FLOOR)
        z = (eta - offset) + (y - mu) / mu
        candidate = solve_weighted_least_squares(X, z, weights=mu)
        if beta is None:
            beta_new = candidate
            dev_new = poisson_deviance(y, np.exp(X @ beta_new + offset))
        else:
            step = 1.0
            for _ in range(30):
                beta_new = beta + step * (candidate - beta)
                dev_new = poisson_deviance(y, np.exp(X @ beta_new + offset))
                if np.isfinite(dev_new) and dev_new <= deviance + 1e-12:
                    break
                step /= 2.0
        eta = X @ beta_new + offset
        trace.append(dev_new)
        dev_change = abs(deviance - dev_new)
        beta, deviance = beta_new, dev_new
        mu = np.exp(eta)
        score = X.T @ (y - mu)
        if dev_change < tol * (abs(deviance) + 0.1) and np.max(np.abs(score)) <= score_tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"IRLS did not converge in {max_iter} iterations", last_iterate=beta
        )

    fitted = np.exp(eta)
    pearson = float(np.sum((y - fitted) ** 2 / np.maximum(fitted, _MU_FLOOR)))
    dof = spec.n_rows - spec.n_params
    dispersion = pearson / dof if dof > 0 else float("nan")
    phi_cov = 1.0 if spec.family == POISSON else dispersion
    info = (X * fitted[:, None]).T @ X
    covariance = phi_cov * np.linalg.inv(info)
    return GlmFit(
        spec=spec,
        coef=beta,
        fitted=fitted,
        deviance=deviance,
        deviance_trace=tuple(trace),
        pearson_statistic=pearson,
        dispersion=float(dispersion),
        covariance=covariance,
        converged=True,
        n_iter=n_iter,
    )


def pearson_dispersion(fit: GlmFit, p_effective: int | None = None) -> float:
    """Pearson dispersion sum[(y - mu)^2 / mu] / (n - p_effective).

    ``p_effective`` defaults to the number of fitted parameters. Pass the
    macro parameter count explicitly when the degrees of freedom should
    not follow the design width.
    """
    if p_effective is None:
        p_effective = fit.spec.n_params
    n = fit.spec.n_rows
    if n <= p_effective:
        raise ValueError(f"need more rows ({n}) than effective parameters ({p_effective})")
    y, mu = fit.spec.y, fit.fitted
    bad = (mu <= _MU_FLOOR) & (y != 0)
    if np.any(bad):
        raise DegenerateFitError("zero fitted mean against a nonzero observation")
    return float(np.sum((y - mu) ** 2 / np.maximum(mu, _MU_FLOOR)) / (n - p_effective))


def coefficient_covariance(fit: GlmFit) -> np.ndarray:
    """Asymptotic coefficient covariance, dispersion times inverse information."""
    return fit.covariance_dispersion * np.linalg.inv(fit.information())


def cross_classified_design(cells, n_periods: int, extra=None) -> np.ndarray:
    """Design rows for the cross-classified model on triangle cells.

    One indicator per occurrence period and one per development period
    2..I; the first development level is the corner constraint (dropped),
    so the occurrence indicators absorb the intercept and the model has
    2 I - 1 parameters. ``extra`` appends covariate columns after the
    indicator block.
    """
    cells = list(cells)
    X = np.zeros((len(cells), 2 * n_periods - 1))
    for r, (i, j) in enumerate(cells):
        if not (1 <= i <= n_periods and 1 <= j <= n_periods):
            raise ValueError(f"cell ({i}, {j}) outside the {n_periods}-period square")
        X[r, i - 1] = 1.0
        if j >= 2:
            X[r, n_periods + j - 2] = 1.0
    if extra is not None:
        extra = np.asarray(extra, dtype=float)
        if extra.ndim == 1:
            extra = extra[:, None]
        if extra.shape[0] != X.shape[0]:
            raise ValueError("extra covariate rows do not match the cell count")
        X = np.hstack([X, extra])
    return X


@dataclass(frozen=True)
class PsiComparison:
    """Residual-ratio comparison of micro and macro dispersion.

    ``psi`` is the ratio of summed squared Pearson residuals (micro over
    macro). The micro model is the more precise one exactly when the total
    payment count reaches ``threshold``; ``micro_leq_macro`` states that
    verdict. The verdict is algebraically equivalent to comparing the two
    Pearson dispersion estimates directly.
    """

    psi: float
    total_payments: int
    n_clusters: int
    threshold: float
    phi_micro: float
    phi_macro: float
    micro_leq_macro: bool


def psi_comparison(micro: GlmFit, macro: GlmFit) -> PsiComparison:
    """Compare micro and macro quasi-Poisson dispersion via the residual ratio."""
    sum_micro = micro.pearson_statistic
    sum_macro = macro.pearson_statistic
    n_total = micro.spec.n_rows
    m = macro.spec.n_rows
    p_micro = micro.spec.n_params
    p_macro = macro.spec.n_params
    psi = sum_micro / sum_macro
    threshold = psi * (m - p_macro) + p_micro
    phi_micro = sum_micro / (n_total - p_micro)
    phi_macro = sum_macro / (m - p_macro)
    return PsiComparison(
        psi=float(psi),
        total_payments=int(n_total),
        n_clusters=int(m),
        threshold=float(threshold),
        phi_micro=float(phi_micro),
        phi_macro=float(phi_macro),
        micro_leq_macro=bool(n_total >= threshold),
    )
