"""Poisson regression with a claim-level random intercept (model G).

Payments of one claim share a latent Gaussian effect, which makes the
marginal distribution over-dispersed and payments of the same claim
positively correlated. The marginal likelihood is maximized with a
one-point Laplace approximation: an inner penalized IRLS finds the joint
mode of fixed effects and claim effects for a candidate variance, and the
profiled variance is optimized on the log scale with an explicit check of
the boundary at zero.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.stats import chi2

from .errors import (
    ConvergenceError,
    ExperimentError,
    IdentifiabilityError,
    PredictionError,
    ReserveLabError,
)
from .glm import (
    POISSON,
    QUASIPOISSON,
    GlmFit,
    GlmSpec,
    cross_classified_design,
    fit_glm,
    poisson_loglik,
)
from .microsim import MicroDataset, SimConfig, child_rng, disaggregate, resolve_threads
from .reserve import ReserveEstimate, fit_macro_model, msep_unconditional
from .triangle import CellIndexSets, Triangle, index_sets

_MU_FLOOR = 1e-290


def marginal_moments(linear_predictor, sigma2):
    """Marginal mean and variance after integrating out the random effect.

    mean = exp(lp + sigma2/2); variance = mean * (1 + mean*(e^sigma2 - 1)).
    The variance strictly exceeds the mean whenever sigma2 > 0, which is
    the over-dispersion the random intercept induces.
    """
    if np.any(np.asarray(sigma2) < 0):
        raise ValueError("sigma2 must be non-negative")
    lp = np.asarray(linear_predictor, dtype=float)
    mean = np.exp(lp + sigma2 / 2.0)
    variance = mean * (1.0 + mean * np.expm1(sigma2))
    if np.isscalar(linear_predictor) and np.isscalar(sigma2):
        return float(mean), float(variance)
    return mean, variance


@dataclass(frozen=True)
class MixedSpec:
    """Payment rows with claim identities for the random-intercept model.

    ``claim_ids`` assigns every payment row a claim; ``claim_year`` (kept
    for reserve prediction) maps every allocated claim id, observed or
    not, to its occurrence period.
    """

    y: np.ndarray
    X: np.ndarray
    offset: np.ndarray
    claim_ids: np.ndarray
    claim_year: np.ndarray | None = None
    n_periods: int | None = None
    cells: tuple | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        X = np.array(self.X, dtype=float)
        offset = np.array(self.offset, dtype=float).ravel()
        claim_ids = np.array(self.claim_ids, dtype=int).ravel()
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValueError("design rows must match responses")
        if offset.size != y.size or claim_ids.size != y.size:
            raise ValueError("offset and claim ids must match responses")
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise ValueError("responses must be finite and non-negative")
        claim_year = self.claim_year
        if claim_year is not None:
            claim_year = np.array(claim_year, dtype=int)
            if claim_ids.size and claim_ids.max() >= claim_year.size:
                raise ValueError("claim id outside the claim_year table")
        cells = self.cells
        if cells is not None:
            cells = tuple((int(i), int(j)) for i, j in cells)
            if len(cells) != y.size:
                raise ValueError("cells must match responses")
        for arr in (y, X, offset, claim_ids):
            arr.setflags(write=False)
        if claim_year is not None:
            claim_year.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "claim_ids", claim_ids)
        object.__setattr__(self, "claim_year", claim_year)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def from_dataset(cls, dataset: MicroDataset) -> "MixedSpec":
        if dataset.claim is None:
            raise ValueError("dataset has no claim allocation (need variant G)")
        return cls(
            y=dataset.amount,
            X=dataset.design(),
            offset=dataset.offsets(),
            claim_ids=dataset.claim,
            claim_year=dataset.claim_year,
            n_periods=dataset.n_periods,
            cells=tuple(dataset.cells()),
        )

    @property
    def n_rows(self) -> int:
        return self.y.size

    def claim_table(self):
        """(unique claim ids, per-row index into them)."""
        return np.unique(self.claim_ids, return_inverse=True)


@dataclass(frozen=True)
class MixedFit:
    """Maximum-likelihood fit of the random-intercept Poisson model.

    ``random_effects`` holds the conditional modes, one per unique claim
    in ``claim_id_table`` order. ``sigma2 == 0`` means the boundary fit:
    all claim effects vanish and ``loglik`` equals ``loglik_fixed``, the
    fixed-effects Poisson log-likelihood at the same design.
    """

    spec: MixedSpec
    fixed_effects: np.ndarray
    sigma2: float
    random_effects: np.ndarray
    claim_id_table: np.ndarray
    loglik: float
    loglik_fixed: float
    fixed_covariance: np.ndarray
    converged: bool

    def random_effect(self, claim_id: int) -> float:
        """Predicted effect of one claim; zero for claims never observed."""
        pos = np.searchsorted(self.claim_id_table, claim_id)
        if pos < len(self.claim_id_table) and self.claim_id_table[pos] == claim_id:
            return float(self.random_effects[pos])
        return 0.0

    def fitted(self) -> np.ndarray:
        gamma_rows = self.random_effects[self._claim_index()] if self.sigma2 > 0 else 0.0
        return np.exp(self.spec.X @ self.fixed_effects + self.spec.offset + gamma_rows)

    def _claim_index(self):
        return np.searchsorted(self.claim_id_table, self.spec.claim_ids)


def _penalized_loglik(y, eta, gamma, sigma2):
    return poisson_loglik(y, np.exp(eta)) - float(gamma @ gamma) / (2.0 * sigma2)


def _pirls(y, X, offset, claim, n_claims, sigma2, c_init, tol=1e-11, max_iter=300):
    """Joint conditional mode of (fixed effects, claim effects).

    Penalized IRLS: each iteration solves the working least-squares
    system by eliminating the diagonal claim block (Schur complement on
    the fixed-effect block), with step halving so the penalized
    log-likelihood never decreases.
    """
    p = X.shape[1]
    c = np.array(c_init, dtype=float)
    gamma = np.zeros(n_claims)
    eta = X @ c + offset
    current = _penalized_loglik(y, eta, gamma, sigma2)
    converged = False
    for _ in range(max_iter):
        mu = np.maximum(np.exp(eta), _MU_FLOOR)
        u = (eta - offset) + (y - mu) / mu
        XtW = X.T * mu
        A = XtW @ X
        B = np.empty((p, n_claims))
        for col in range(p):
            B[col] = np.bincount(claim, weights=mu * X[:, col], minlength=n_claims)
        D = np.bincount(claim, weights=mu, minlength=n_claims) + 1.0 / sigma2
        BD = B / D
        rx = XtW @ u
        rz = np.bincount(claim, weights=mu * u, minlength=n_claims)
        try:
            c_new = np.linalg.solve(A - BD @ B.T, rx - BD @ rz)
        except np.linalg.LinAlgError:
            return c, gamma, False
        gamma_new = (rz - B.T @ c_new) / D
        step = 1.0
        accepted = None
        for _ in range(40):
            c_try = c + step * (c_new - c)
            gamma_try = gamma + step * (gamma_new - gamma)
            eta_try = X @ c_try + offset + gamma_try[claim]
            candidate = _penalized_loglik(y, eta_try, gamma_try, sigma2)
            if np.isfinite(candidate) and candidate >= current - 1e-10:
                accepted = (c_try, gamma_try, eta_try, candidate)
                break
            step /= 2.0
        if accepted is None:
            break
        delta = accepted[3] - current
        c, gamma, eta, current = accepted
        if abs(delta) < tol * (abs(current) + 1.0):
            converged = True
            break
    return c, gamma, converged


def _laplace_loglik(y, X, offset, claim, n_claims, sigma2, c_init):
    """Laplace-approximated marginal log-likelihood, profiled over (c, gamma)."""
    c, gamma, ok = _pirls(y, X, offset, claim, n_claims, sigma2, c_init)
    if not ok:
        return -np.inf, c, gamma
    mu = np.exp(X @ c + offset + gamma[claim])
    per_claim_mu = np.bincount(claim, weights=mu, minlength=n_claims)
    ll = (
        poisson_loglik(y, mu)
        - float(gamma @ gamma) / (2.0 * sigma2)
        - 0.5 * n_claims * np.log(sigma2)
        - 0.5 * float(np.sum(np.log(per_claim_mu + 1.0 / sigma2)))
    )
    return ll, c, gamma


def _fixed_block_covariance(y, X, offset, claim, n_claims, c, gamma, sigma2):
    """Covariance of the fixed effects at the mode (inverse Schur complement)."""
    mu = np.exp(X @ c + offset + (gamma[claim] if sigma2 > 0 else 0.0))
    XtW = X.T * mu
    A = XtW @ X
    if sigma2 <= 0:
        return np.linalg.inv(A)
    p = X.shape[1]
    B = np.empty((p, n_claims))
    for col in range(p):
        B[col] = np.bincount(claim, weights=mu * X[:, col], minlength=n_claims)
    D = np.bincount(claim, weights=mu, minlength=n_claims) + 1.0 / sigma2
    return np.linalg.inv(A - (B / D) @ B.T)


def fit_mixed(
    spec: MixedSpec,
    sigma2_bounds=(1e-6, 10.0),
    grid_points: int = 21,
) -> MixedFit:
    """Maximize the Laplace-approximated likelihood over (c, sigma2 >= 0).

    The variance profile is scanned on a log-scale grid, refined with a
    bounded scalar search, and compared against the boundary value
    sigma2 = 0 (the plain Poisson fit). Needs at least two claims for the
    variance to be identifiable.
    """
    claim_table, claim = spec.claim_table()
    n_claims = claim_table.size
    if n_claims < 2:
        raise IdentifiabilityError("variance needs at least two distinct claims")
    y, X, offset = spec.y, spec.X, spec.offset

    fixed = fit_glm(GlmSpec(y=y, X=X, offset=offset, family=POISSON))
    ll_fixed = fixed.loglik()
    c_init = fixed.coef

    log_lo, log_hi = np.log(sigma2_bounds[0]), np.log(sigma2_bounds[1])
    grid = np.linspace(log_lo, log_hi, grid_points)
    grid_ll = np.array(
        [_laplace_loglik(y, X, offset, claim, n_claims, np.exp(g), c_init)[0] for g in grid]
    )
    if not np.any(np.isfinite(grid_ll)):
        raise ConvergenceError(
            "inner mode search failed for every variance candidate; "
            f"log-variance grid {grid[0]:.2f}..{grid[-1]:.2f} "
            f"({grid_points} points, all non-finite)",
            last_iterate=c_init,
        )
    k = int(np.nanargmax(grid_ll))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, grid_points - 1)]
    result = optimize.minimize_scalar(
        lambda g: -_laplace_loglik(y, X, offset, claim, n_claims, np.exp(g), c_init)[0],
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-8},
    )
    sigma2_hat = float(np.exp(result.x))
    ll_hat = -float(result.fun)
    if max(ll_hat, grid_ll[k]) <= ll_fixed + 1e-9:
        # boundary: no evidence of between-claim variation
        return MixedFit(
            spec=spec,
            fixed_effects=fixed.coef,
            sigma2=0.0,
            random_effects=np.zeros(n_claims),
            claim_id_table=claim_table,
            loglik=ll_fixed,
            loglik_fixed=ll_fixed,
            fixed_covariance=fixed.covariance,
            converged=True,
        )
    if grid_ll[k] > ll_hat:
        sigma2_hat = float(np.exp(grid[k]))
    ll_hat, c_hat, gamma_hat = _laplace_loglik(
        y, X, offset, claim, n_claims, sigma2_hat, c_init
    )
    if not np.isfinite(ll_hat):
        raise ConvergenceError("inner mode search failed at the selected variance")
    covariance = _fixed_block_covariance(
        y, X, offset, claim, n_claims, c_hat, gamma_hat, sigma2_hat
    )
    return MixedFit(
        spec=spec,
        fixed_effects=c_hat,
        sigma2=sigma2_hat,
        random_effects=gamma_hat,
        claim_id_table=claim_table,
        loglik=float(ll_hat),
        loglik_fixed=ll_fixed,
        fixed_covariance=covariance,
        converged=True,
    )


# ---------------------------------------------------------------------------
# Reserve prediction

CONDITIONAL = "conditional"
UNCONDITIONAL = "unconditional"


def predict_reserve(
    fit: MixedFit,
    mode: str = CONDITIONAL,
    var_draws: int = 2000,
    rng: np.random.Generator | None = None,
    model: str | None = None,
) -> ReserveEstimate:
    """Reserve prediction from a mixed fit, with Monte-Carlo uncertainty.

    Every unobserved cell (i, j) is shared equally by the M_i claims of
    its occurrence period. Unconditional mode multiplies the cell rate by
    exp(sigma2/2) (the marginal mean over a fresh claim effect);
    conditional mode averages exp(gamma_t) over the period's claims at
    their predicted effects, zero for claims never observed.

    The reported ``msep`` is the predictive variance of the reserve,
    estimated from ``var_draws`` draws of the fixed effects (asymptotic
    normal), claim effects (refreshed in unconditional mode, held at
    their predictions in conditional mode) and Poisson process noise;
    ``process_term`` is the expected Poisson variance and
    ``estimation_term`` the remainder.
    """
    if mode not in (CONDITIONAL, UNCONDITIONAL):
        raise ValueError(f"unknown prediction mode: {mode!r}")
    spec = fit.spec
    if spec.n_periods is None:
        raise PredictionError("fit carries no triangle geometry (n_periods missing)")
    if spec.claim_year is None:
        raise PredictionError("fit carries no claim allocation table")
    claim_year = spec.claim_year
    if fit.claim_id_table.size and fit.claim_id_table.max() >= claim_year.size:
        raise PredictionError("fitted claim id unknown to the claim_year table")
    sets = CellIndexSets.for_periods(spec.n_periods)

    base_width = 2 * spec.n_periods - 1
    Xk = cross_classified_design(sets.unobserved, spec.n_periods)
    if spec.X.shape[1] > base_width:
        Xk = np.hstack([Xk, np.zeros((Xk.shape[0], spec.X.shape[1] - base_width))])

    # claim effects for every allocated claim, zero where never observed
    gamma_all = np.zeros(claim_year.size)
    gamma_all[fit.claim_id_table] = fit.random_effects

    years = np.arange(1, spec.n_periods + 1)
    claims_of_year = {int(i): np.flatnonzero(claim_year == i) for i in years}
    if mode == CONDITIONAL:
        multiplier = {
            i: float(np.mean(np.exp(gamma_all[ids]))) if ids.size else 1.0
            for i, ids in claims_of_year.items()
        }
    else:
        multiplier = {i: float(np.exp(fit.sigma2 / 2.0)) for i in years}

    lam_cells = np.exp(Xk @ fit.fixed_effects)
    cell_years = np.array([i for (i, _) in sets.unobserved])
    point = lam_cells * np.array([multiplier[int(i)] for i in cell_years])
    cells = tuple(zip(sets.unobserved, (float(v) for v in point)))

    rng = np.random.default_rng(0) if rng is None else rng
    c_star = rng.multivariate_normal(
        fit.fixed_effects, fit.fixed_covariance, size=var_draws, method="svd"
    )
    lam_star = np.exp(c_star @ Xk.T)  # (draws, cells)
    mult_star = np.empty((var_draws, spec.n_periods))
    sd = np.sqrt(fit.sigma2)
    for i in years:
        ids = claims_of_year[int(i)]
        if mode == UNCONDITIONAL and ids.size and sd > 0:
            g = rng.normal(0.0, sd, size=(var_draws, ids.size))
            mult_star[:, i - 1] = np.exp(g).mean(axis=1)
        else:
            mult_star[:, i - 1] = multiplier[int(i)]
    mu_star = lam_star * mult_star[:, cell_years - 1]
    reserves = rng.poisson(mu_star).sum(axis=1).astype(float)
    total_var = float(reserves.var(ddof=1))
    process = float(mu_star.sum(axis=1).mean())

    tag = model if model is not None else f"G-{mode}"
    return ReserveEstimate(
        model=tag,
        best_estimate=float(point.sum()),
        cell_predictions=cells,
        dispersion=None,
        msep=total_var,
        process_term=process,
        estimation_term=total_var - process,
    )


def fitted_cell_totals(fit: MixedFit, mode: str = CONDITIONAL) -> dict:
    """Fitted totals of the observed clusters, by prediction mode.

    Conditional mode sums the per-payment fitted means (claim effects at
    their predictions); unconditional mode integrates the claim effects
    out, so each payment contributes exp(x'c + offset + sigma2/2).
    """
    spec = fit.spec
    if spec.cells is None:
        raise PredictionError("fit carries no cluster coordinates")
    if mode == CONDITIONAL:
        mu = fit.fitted()
    elif mode == UNCONDITIONAL:
        mu = np.exp(spec.X @ fit.fixed_effects + spec.offset + fit.sigma2 / 2.0)
    else:
        raise ValueError(f"unknown prediction mode: {mode!r}")
    totals = {}
    for cell, value in zip(spec.cells, mu):
        totals[cell] = totals.get(cell, 0.0) + float(value)
    return totals


# ---------------------------------------------------------------------------
# Likelihood-ratio test at the boundary


@dataclass(frozen=True)
class LrtResult:
    """Boundary likelihood-ratio test of sigma2 = 0.

    The asymptotic null is the 50/50 mixture of a point mass at zero and
    chi-square with one degree of freedom, so the p-value is one at a zero
    statistic and half the chi-square tail otherwise.
    """

    statistic: float
    p_value: float
    bootstrap_p: float | None = None
    bootstrap_replicates: int | None = None


def _mixture_p_value(statistic: float) -> float:
    if statistic <= 0.0:
        return 1.0
    return float(0.5 * chi2.sf(statistic, df=1))


def lrt_variance(
    mixed_fit: MixedFit,
    fixed_fit: GlmFit | None = None,
    bootstrap: int = 0,
    rng: np.random.Generator | None = None,
) -> LrtResult:
    """Test sigma2 = 0 against sigma2 > 0 on one dataset.

    ``fixed_fit`` must be the Poisson fit of the identical rows and
    design; when omitted, the boundary fit computed inside
    :func:`fit_mixed` is used. The optional parametric bootstrap
    resimulates under the fitted null and refits both models.
    """
    spec = mixed_fit.spec
    if fixed_fit is not None:
        same = (
            fixed_fit.spec.y.shape == spec.y.shape
            and np.array_equal(fixed_fit.spec.y, spec.y)
            and np.array_equal(fixed_fit.spec.X, spec.X)
            and np.array_equal(fixed_fit.spec.offset, spec.offset)
        )
        if not same:
            raise ValueError("fixed fit is not nested in the mixed fit (rows differ)")
        ll_fixed = fixed_fit.loglik()
    else:
        ll_fixed = mixed_fit.loglik_fixed
    if mixed_fit.loglik < ll_fixed - 1e-6:
        raise ConvergenceError(
            "mixed log-likelihood fell below the fixed-effects one; optimizer failure"
        )
    statistic = max(0.0, 2.0 * (mixed_fit.loglik - ll_fixed))
    result = LrtResult(statistic=statistic, p_value=_mixture_p_value(statistic))
    if bootstrap <= 0:
        return result
    rng = np.random.default_rng(0) if rng is None else rng
    if fixed_fit is None:
        fixed_fit = fit_glm(GlmSpec(y=spec.y, X=spec.X, offset=spec.offset, family=POISSON))
    stats = np.empty(bootstrap)
    for b in range(bootstrap):
        y_star = rng.poisson(fixed_fit.fitted).astype(float)
        null_spec = dataclasses.replace(spec, y=y_star)
        refit = fit_mixed(null_spec)
        stats[b] = max(0.0, 2.0 * (refit.loglik - refit.loglik_fixed))
    bootstrap_p = float(np.mean(stats >= statistic)) if statistic > 0 else 1.0
    return dataclasses.replace(result, bootstrap_p=bootstrap_p, bootstrap_replicates=bootstrap)


def simulate_null_lrt(
    replicates: int = 500,
    n_claims: int = 400,
    rows_per_claim: int = 4,
    mean: float = 100.0,
    seed: int = 0,
) -> np.ndarray:
    """LRT statistics under the null (no between-claim variation).

    Each replicate simulates independent Poisson rows, fits the fixed and
    mixed models, and records the boundary statistic. Used to verify the
    50/50 mixture null distribution.
    """
    n = n_claims * rows_per_claim
    claim = np.repeat(np.arange(n_claims), rows_per_claim)
    X = np.ones((n, 1))
    offset = np.zeros(n)
    stats = np.empty(replicates)
    for r in range(replicates):
        rng = child_rng(seed, r)
        y = rng.poisson(mean, size=n).astype(float)
        spec = MixedSpec(y=y, X=X, offset=offset, claim_ids=claim)
        fit = fit_mixed(spec)
        stats[r] = max(0.0, 2.0 * (fit.loglik - fit.loglik_fixed))
    return stats


# ---------------------------------------------------------------------------
# Replicated model-G experiment


@dataclass(frozen=True)
class MixedReplicateRecord:
    """Outcome of one variant-G replicate.

    ``fitted_conditional`` and ``fitted_unconditional`` hold the fitted
    totals of the observed clusters as ``((i, j), value)`` pairs; the
    reserve estimates hold the unobserved-cell predictions.
    """

    index: int
    n_payments: int
    n_claims: int
    sigma2: float
    lrt_statistic: float
    lrt_p_value: float
    unconditional: ReserveEstimate
    conditional: ReserveEstimate
    fitted_conditional: tuple
    fitted_unconditional: tuple


@dataclass(frozen=True)
class MixedExperimentSummary:
    """Replicate records and averages for the mixed-model experiment."""

    config: SimConfig
    records: tuple
    failures: tuple
    mean_sigma2: float
    share_significant: float
    mean_unconditional: float
    mean_conditional: float
    mean_unconditional_sqrt_var: float
    mean_conditional_sqrt_var: float
    macro_reference: ReserveEstimate


def _run_mixed_replicate(triangle, config, index, var_draws, bootstrap):
    rng = child_rng(config.seed, index)
    dataset = disaggregate(triangle, config, rng)
    spec = MixedSpec.from_dataset(dataset)
    fit = fit_mixed(spec)
    lrt = lrt_variance(fit, bootstrap=bootstrap, rng=child_rng(config.seed, index, 1))
    unconditional = predict_reserve(
        fit, mode=UNCONDITIONAL, var_draws=var_draws, rng=child_rng(config.seed, index, 2)
    )
    conditional = predict_reserve(
        fit, mode=CONDITIONAL, var_draws=var_draws, rng=child_rng(config.seed, index, 3)
    )
    fitted_cond = tuple(sorted(fitted_cell_totals(fit, CONDITIONAL).items()))
    fitted_uncond = tuple(sorted(fitted_cell_totals(fit, UNCONDITIONAL).items()))
    return MixedReplicateRecord(
        index=index,
        n_payments=dataset.n_payments,
        n_claims=fit.claim_id_table.size,
        sigma2=fit.sigma2,
        lrt_statistic=lrt.statistic,
        lrt_p_value=lrt.p_value,
        unconditional=unconditional,
        conditional=conditional,
        fitted_conditional=fitted_cond,
        fitted_unconditional=fitted_uncond,
    )


def run_mixed_experiment(
    triangle: Triangle,
    config: SimConfig,
    threads: int = 1,
    var_draws: int = 2000,
    bootstrap: int = 0,
) -> MixedExperimentSummary:
    """Disaggregate with claim allocation and fit model G per replicate.

    Child seeds follow the same (seed, replicate) rule as the
    quasi-Poisson experiment, so results are schedule-independent. The
    macro quasi-Poisson fit of the pristine triangle is attached as the
    collective reference.
    """
    if config.variant != "G":
        raise ValueError("mixed experiment needs variant G")
    macro_fit = fit_macro_model(triangle, family=QUASIPOISSON)
    macro_reference = msep_unconditional(macro_fit, index_sets(triangle), model="B")

    def one(index):
        try:
            return _run_mixed_replicate(triangle, config, index, var_draws, bootstrap)
        except (ReserveLabError, np.linalg.LinAlgError) as exc:
            return (index, f"{type(exc).__name__}: {exc}")

    threads = resolve_threads(threads)
    indexes = range(config.replicates)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, indexes))
    else:
        outcomes = [one(index) for index in indexes]
    records = tuple(sorted((o for o in outcomes if isinstance(o, MixedReplicateRecord)),
                           key=lambda r: r.index))
    failures = tuple(sorted(o for o in outcomes if not isinstance(o, MixedReplicateRecord)))
    if len(failures) > config.max_failure_share * config.replicates:
        raise ExperimentError(
            f"{len(failures)} of {config.replicates} replicates failed: {failures[0][1]}"
        )
    return MixedExperimentSummary(
        config=config,
        records=records,
        failures=failures,
        mean_sigma2=float(np.mean([r.sigma2 for r in records])),
        share_significant=float(np.mean([r.lrt_p_value < 0.05 for r in records])),
        mean_unconditional=float(np.mean([r.unconditional.best_estimate for r in records])),
        mean_conditional=float(np.mean([r.conditional.best_estimate for r in records])),
        mean_unconditional_sqrt_var=float(
            np.mean([np.sqrt(r.unconditional.msep) for r in records])
        ),
        mean_conditional_sqrt_var=float(
            np.mean([np.sqrt(r.conditional.msep) for r in records])
        ),
        macro_reference=macro_reference,
    )


MIXED_FIGURE_COLUMNS = (
    "occurrence",
    "development",
    "region",
    "observed",
    "mean_conditional",
    "mean_unconditional",
    "macro",
)


def mixed_figure_rows(summary: MixedExperimentSummary, triangle: Triangle) -> list:
    """Per-cell prediction data behind the observed/unobserved figures.

    Observed cells pair the data with the replicate-averaged fitted
    totals; unobserved cells pair the macro reference with the averaged
    conditional and unconditional predictions.
    """
    sets = index_sets(triangle)
    records = summary.records
    rows = []

    def averaged(pairs_of):
        acc = {}
        for record in records:
            for cell, value in pairs_of(record):
                acc[cell] = acc.get(cell, 0.0) + value
        return {cell: total / len(records) for cell, total in acc.items()}

    fitted_cond = averaged(lambda r: r.fitted_conditional)
    fitted_uncond = averaged(lambda r: r.fitted_unconditional)
    pred_cond = averaged(lambda r: r.conditional.cell_predictions)
    pred_uncond = averaged(lambda r: r.unconditional.cell_predictions)
    macro = dict(summary.macro_reference.cell_predictions)
    for (i, j) in sets.observed:
        rows.append(
            {
                "occurrence": i,
                "development": j,
                "region": "observed",
                "observed": triangle.cell(i, j),
                "mean_conditional": fitted_cond[(i, j)],
                "mean_unconditional": fitted_uncond[(i, j)],
                "macro": None,
            }
        )
    for (i, j) in sets.unobserved:
        rows.append(
            {
                "occurrence": i,
                "development": j,
                "region": "unobserved",
                "observed": None,
                "mean_conditional": pred_cond[(i, j)],
                "mean_unconditional": pred_uncond[(i, j)],
                "macro": macro[(i, j)],
            }
        )
    return rows


def mixed_figure_csv(summary: MixedExperimentSummary, triangle: Triangle) -> str:
    """Per-cell prediction data serialized as CSV."""
    lines = [",".join(MIXED_FIGURE_COLUMNS)]
    for row in mixed_figure_rows(summary, triangle):
        fields = []
        for column in MIXED_FIGURE_COLUMNS:
            value = row[column]
            if value is None:
                fields.append("")
            elif isinstance(value, float):
                fields.append(repr(value))
            else:
                fields.append(str(value))
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


class MixedPoissonReserver:
    """Model G as an estimator: fit a claim-allocated dataset, predict both ways.

    Attributes
    ----------
    fit_ : MixedFit
    sigma2_ : float
    """

    def __init__(self, var_draws: int = 2000, seed: int = 0):
        self.var_draws = var_draws
        self.seed = seed

    def get_params(self, deep=True):
        return {"var_draws": self.var_draws, "seed": self.seed}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in ("var_draws", "seed"):
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, dataset: MicroDataset, y=None):
        spec = MixedSpec.from_dataset(dataset)
        self.fit_ = fit_mixed(spec)
        self.sigma2_ = self.fit_.sigma2
        self.fixed_effects_ = self.fit_.fixed_effects
        self.random_effects_ = self.fit_.random_effects
        self.loglik_ = self.fit_.loglik
        return self

    def predict(self, mode: str = CONDITIONAL) -> ReserveEstimate:
        if not hasattr(self, "fit_"):
            raise ValueError("estimator is not fitted")
        rng = child_rng(self.seed, 0 if mode == CONDITIONAL else 1)
        return predict_reserve(self.fit_, mode=mode, var_draws=self.var_draws, rng=rng)
