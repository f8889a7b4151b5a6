"""Reserving models on a run-off triangle.

Best estimates and unconditional prediction uncertainty for the
cross-classified (quasi-)Poisson models, and the distribution-free Mack
chain-ladder baseline. The Poisson best estimate coincides with the
chain-ladder reserve; the quasi-Poisson one differs from it only through
the dispersion entering the MSEP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import KindMismatchError, SingularDesignError
from .glm import (
    POISSON,
    QUASIPOISSON,
    GlmFit,
    GlmSpec,
    PsiComparison,
    cross_classified_design,
    fit_glm,
)
from .triangle import (
    CUMULATIVE,
    INCREMENTAL,
    CellIndexSets,
    Triangle,
    index_sets,
    to_cumulative,
)


@dataclass(frozen=True)
class ReserveEstimate:
    """Best estimate of the outstanding reserve, optionally with its MSEP.

    ``cell_predictions`` lists one ``((i, j), amount)`` pair per unobserved
    cell in row-major order; their sum is the best estimate. ``msep``
    splits into the process term (dispersion times predicted amounts) and
    the estimation term (a positive-semidefinite quadratic form in the
    coefficient covariance).
    """

    model: str
    best_estimate: float
    cell_predictions: tuple
    dispersion: float | None = None
    msep: float | None = None
    process_term: float | None = None
    estimation_term: float | None = None

    @property
    def sqrt_msep(self) -> float | None:
        return None if self.msep is None else float(np.sqrt(self.msep))

    def prediction(self, cell) -> float:
        for c, value in self.cell_predictions:
            if c == cell:
                return value
        raise KeyError(f"cell {cell} is not predicted by this estimate")

    def cells(self) -> tuple:
        return tuple(c for c, _ in self.cell_predictions)


def _unobserved_design(fit: GlmFit, sets: CellIndexSets, cells=None) -> np.ndarray:
    """Design rows for the unobserved cells, matching the fit's width.

    Unobserved clusters carry exposure one and covariates at their
    marginal mean of zero, so extra columns beyond the cross-classified
    block are zero-padded.
    """
    base_width = 2 * sets.n_periods - 1
    p = fit.spec.n_params
    if p < base_width:
        raise ValueError(
            f"fit has {p} parameters but the {sets.n_periods}-period "
            f"cross-classified design needs at least {base_width}"
        )
    if cells is None:
        cells = sets.unobserved
    Xk = cross_classified_design(cells, sets.n_periods)
    if p > base_width:
        Xk = np.hstack([Xk, np.zeros((Xk.shape[0], p - base_width))])
    return Xk


def best_estimate(fit: GlmFit, sets: CellIndexSets, model: str = "A") -> ReserveEstimate:
    """Reserve best estimate: predicted unobserved cells, summed.

    Macro and micro fits of the same data give the same number because
    they share the coefficient vector; per-cell predictions use cluster
    exposure one.
    """
    Xk = _unobserved_design(fit, sets)
    yhat = np.exp(Xk @ fit.coef)
    cells = tuple(zip(sets.unobserved, (float(v) for v in yhat)))
    return ReserveEstimate(model=model, best_estimate=float(yhat.sum()), cell_predictions=cells)


def msep_unconditional(
    fit: GlmFit,
    sets: CellIndexSets,
    phi: float | None = None,
    model: str = "A",
    cells=None,
) -> ReserveEstimate:
    """Unconditional mean square error of prediction for the reserve.

    The process term is ``phi`` times the summed predictions; the
    estimation term is the double sum of ``phi * yhat_u * yhat_v`` times
    the linearised covariance of the two cells' linear predictors. Both
    scale linearly in ``phi``; ``phi`` defaults to the fit's covariance
    dispersion (one for Poisson, Pearson estimate for quasi-Poisson).
    ``cells`` restricts the prediction to a subset of the unobserved
    cells (partial reserves).
    """
    if phi is None:
        phi = fit.covariance_dispersion
    if cells is None:
        cells = sets.unobserved
    else:
        cells = tuple(cells)
        unknown = [c for c in cells if c not in set(sets.unobserved)]
        if unknown:
            raise ValueError(f"cells {unknown} are not unobserved clusters")
    Xk = _unobserved_design(fit, sets, cells)
    yhat = np.exp(Xk @ fit.coef)
    info = fit.information()
    try:
        lp_cov = Xk @ np.linalg.solve(info, Xk.T)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("Fisher information is singular") from exc
    process = phi * yhat.sum()
    estimation = phi * float(yhat @ lp_cov @ yhat)
    predictions = tuple(zip(cells, (float(v) for v in yhat)))
    return ReserveEstimate(
        model=model,
        best_estimate=float(yhat.sum()),
        cell_predictions=predictions,
        dispersion=float(phi),
        msep=float(process + estimation),
        process_term=float(process),
        estimation_term=float(estimation),
    )


def fit_macro_model(triangle: Triangle, family: str = POISSON) -> GlmFit:
    """Fit the cross-classified GLM to the observed cells of a triangle."""
    if triangle.kind != INCREMENTAL:
        raise KindMismatchError("macro model fits incremental triangles")
    sets = index_sets(triangle)
    y = np.array([triangle.cell(i, j) for (i, j) in sets.observed])
    X = cross_classified_design(sets.observed, sets.n_periods)
    return fit_glm(GlmSpec(y=y, X=X, family=family))


# ---------------------------------------------------------------------------
# Mack's model


@dataclass(frozen=True)
class MackFit:
    """Fitted Mack chain-ladder model.

    ``sigma2`` holds the variance parameters per development step; the
    last one is not estimable from data and follows Mack's extrapolation
    convention. ``completed`` is the cumulative square with the lower
    part filled by the development factors.
    """

    development_factors: np.ndarray
    sigma2: np.ndarray
    completed: np.ndarray
    reserve: float
    msep: float
    per_origin_reserve: np.ndarray
    per_origin_msep: np.ndarray

    @property
    def sqrt_msep(self) -> float:
        return float(np.sqrt(self.msep))


def mack(triangle: Triangle) -> MackFit:
    """Fit Mack's model to a cumulative triangle.

    Volume-weighted development factors, Mack's weighted residual variance
    estimator, and the per-origin MSEP formula summed with cross-origin
    covariance terms. The tail variance uses Mack's convention
    ``min(s4[-1]/s2[-2], s2[-2], s2[-1])``.
    """
    if triangle.kind != CUMULATIVE:
        raise KindMismatchError("Mack's model fits cumulative triangles")
    n = triangle.n_periods
    if n < 2:
        raise ValueError("Mack's model needs at least two periods")
    C = triangle.values

    factors = np.zeros(n - 1)
    for j in range(n - 1):
        rows = n - j - 1  # rows with both column j and j+1 observed
        denom = C[:rows, j].sum()
        if denom == 0:
            raise ValueError(f"zero cumulative column sum at development {j + 1}")
        factors[j] = C[:rows, j + 1].sum() / denom

    sigma2 = np.zeros(n - 1)
    estimable = n - 2  # last step has a single ratio
    for j in range(estimable):
        rows = n - j - 1
        ratios = C[:rows, j + 1] / C[:rows, j]
        sigma2[j] = float((C[:rows, j] * (ratios - factors[j]) ** 2).sum() / (rows - 1))
    if estimable >= 2:
        tail = min(sigma2[estimable - 2], sigma2[estimable - 1])
        if sigma2[estimable - 2] > 0:
            tail = min(tail, sigma2[estimable - 1] ** 2 / sigma2[estimable - 2])
        sigma2[n - 2] = tail
    elif estimable == 1:
        sigma2[n - 2] = sigma2[0]

    completed = C.copy()
    for i in range(1, n):
        for j in range(n - i, n):
            completed[i, j] = completed[i, j - 1] * factors[j - 1]
    per_origin_reserve = np.zeros(n)
    for i in range(1, n):
        per_origin_reserve[i] = completed[i, n - 1] - C[i, n - 1 - i]

    col_sums = np.array([C[: n - j - 1, j].sum() for j in range(n - 1)])
    per_origin_msep = np.zeros(n)
    for i in range(1, n):
        acc = 0.0
        for j in range(n - 1 - i, n - 1):
            acc += sigma2[j] / factors[j] ** 2 * (1.0 / completed[i, j] + 1.0 / col_sums[j])
        per_origin_msep[i] = completed[i, n - 1] ** 2 * acc
    total = per_origin_msep.sum()
    for i in range(1, n):
        shared = sum(
            sigma2[j] / factors[j] ** 2 / col_sums[j] for j in range(n - 1 - i, n - 1)
        )
        for k in range(i + 1, n):
            total += 2.0 * completed[i, n - 1] * completed[k, n - 1] * shared

    return MackFit(
        development_factors=factors,
        sigma2=sigma2,
        completed=completed,
        reserve=float(per_origin_reserve.sum()),
        msep=float(total),
        per_origin_reserve=per_origin_reserve,
        per_origin_msep=per_origin_msep,
    )


# ---------------------------------------------------------------------------
# Model comparison


@dataclass(frozen=True)
class ModelComparison:
    """Side-by-side record of a macro and a micro reserve estimate.

    ``sqrt_msep_gap`` is macro minus micro: positive means the micro model
    is the more precise one. When a :class:`PsiComparison` is supplied,
    ``psi_consistent`` states whether its verdict matches the realized
    sign of the gap.
    """

    macro_best_estimate: float
    micro_best_estimate: float
    best_estimate_relative_gap: float
    best_estimates_match: bool
    macro_sqrt_msep: float | None
    micro_sqrt_msep: float | None
    sqrt_msep_gap: float | None
    psi: PsiComparison | None = None
    psi_consistent: bool | None = None


def compare_micro_macro(
    macro: ReserveEstimate,
    micro: ReserveEstimate,
    psi: PsiComparison | None = None,
) -> ModelComparison:
    """Compare a macro and a micro estimate of the same triangle.

    Raises ``ValueError`` when the two estimates predict different cell
    sets. Best estimates are expected to match to 1e-6 relative (they are
    the same number by the score-equation argument); the MSEP gap carries
    the precision comparison.
    """
    if macro.cells() != micro.cells():
        raise ValueError("estimates predict different cell sets")
    rel_gap = abs(macro.best_estimate - micro.best_estimate) / abs(macro.best_estimate)
    gap = None
    if macro.msep is not None and micro.msep is not None:
        gap = float(np.sqrt(macro.msep) - np.sqrt(micro.msep))
    consistent = None
    if psi is not None and gap is not None:
        # verdict phi_micro <= phi_macro must match msep_micro <= msep_macro
        consistent = bool(psi.micro_leq_macro == (gap >= 0.0))
    return ModelComparison(
        macro_best_estimate=macro.best_estimate,
        micro_best_estimate=micro.best_estimate,
        best_estimate_relative_gap=float(rel_gap),
        best_estimates_match=bool(rel_gap <= 1e-6),
        macro_sqrt_msep=macro.sqrt_msep,
        micro_sqrt_msep=micro.sqrt_msep,
        sqrt_msep_gap=gap,
        psi=psi,
        psi_consistent=consistent,
    )


# ---------------------------------------------------------------------------
# Estimator front ends


class GlmReserver(BaseEstimator):
    """Macro-level (quasi-)Poisson reserving on a run-off triangle.

    ``family="poisson"`` is the pure chain-ladder-equivalent model (tag A);
    ``family="quasipoisson"`` keeps its best estimate and rescales the
    MSEP by the Pearson dispersion (tag B).

    Attributes
    ----------
    glm_ : GlmFit
        The underlying cross-classified fit.
    reserve_ : ReserveEstimate
        Best estimate with unconditional MSEP.
    """

    def __init__(self, family: str = POISSON):
        self.family = family

    def fit(self, triangle: Triangle, y=None):
        if not isinstance(triangle, Triangle):
            raise TypeError("GlmReserver.fit expects a Triangle")
        if self.family not in (POISSON, QUASIPOISSON):
            raise ValueError(f"unknown family: {self.family!r}")
        self.sets_ = index_sets(triangle)
        self.glm_ = fit_macro_model(triangle, family=self.family)
        tag = "A" if self.family == POISSON else "B"
        self.reserve_ = msep_unconditional(self.glm_, self.sets_, model=tag)
        self.dispersion_ = self.glm_.dispersion
        self.best_estimate_ = self.reserve_.best_estimate
        self.msep_ = self.reserve_.msep
        self.sqrt_msep_ = self.reserve_.sqrt_msep
        return self

    def predict(self, cells=None):
        """Predicted amounts for unobserved cells (all of them by default)."""
        check_is_fitted(self, "reserve_")
        if cells is None:
            return np.array([v for _, v in self.reserve_.cell_predictions])
        return np.array([self.reserve_.prediction(c) for c in cells])


class MackChainLadder(BaseEstimator):
    """Mack's distribution-free chain ladder as an estimator.

    Accepts an incremental or cumulative triangle; incremental input is
    accumulated first.
    """

    def fit(self, triangle: Triangle, y=None):
        if not isinstance(triangle, Triangle):
            raise TypeError("MackChainLadder.fit expects a Triangle")
        if triangle.kind == INCREMENTAL:
            triangle = to_cumulative(triangle)
        self.mack_ = mack(triangle)
        self.development_factors_ = self.mack_.development_factors
        self.sigma2_ = self.mack_.sigma2
        self.reserve_ = self.mack_.reserve
        self.msep_ = self.mack_.msep
        self.sqrt_msep_ = self.mack_.sqrt_msep
        return self

    def predict(self):
        """Completed cumulative square."""
        check_is_fitted(self, "mack_")
        return self.mack_.completed.copy()
