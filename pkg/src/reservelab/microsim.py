"""Monte-Carlo disaggregation of a macro triangle into micro payments.

Every observed cluster's amount is split into a Poisson-distributed number
of payments via symmetric Dirichlet proportions, floored to whole currency
units. Replicated experiments refit the micro model per replicate and
summarize reserve and MSEP; each replicate derives its own child RNG from
the master seed and replicate index, so results do not depend on the
execution schedule.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ExperimentError, ReserveLabError
from .glm import (
    POISSON,
    QUASIPOISSON,
    GlmFit,
    GlmSpec,
    cross_classified_design,
    fit_glm,
    psi_comparison,
)
from .reserve import (
    ReserveEstimate,
    compare_micro_macro,
    fit_macro_model,
    msep_unconditional,
)
from .triangle import INCREMENTAL, CellIndexSets, Triangle, index_sets

VARIANTS = ("C", "D", "E", "F", "G")

# Default expected-payments-per-cluster sweep for figure reproduction.
DEFAULT_THETA_SWEEP = (10.0, 25.0, 50.0, 100.0, 125.0, 150.0, 250.0)

_ENV_THREADS = "RESERVE_LAB_THREADS"


def child_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Child generator for (master seed, key...), independent of call order."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, key)]))


def resolve_threads(requested: int) -> int:
    """Requested worker count, capped by the RESERVE_LAB_THREADS variable."""
    threads = max(1, int(requested))
    cap = os.environ.get(_ENV_THREADS)
    if cap is not None:
        threads = max(1, min(threads, int(cap)))
    return threads


@dataclass(frozen=True)
class MicroDataset:
    """Individual payments with cluster coordinates.

    ``counts`` maps every observed cluster to its payment count n_g (at
    least one per cluster; a zero-amount cluster holds a single zero
    payment). ``claim`` and ``claim_year`` are present for the
    claim-allocated (variant G) datasets: ``claim`` assigns every payment
    a claim id, and ``claim_year[t]`` is the occurrence period of claim
    ``t`` over all allocated claims, including claims that received no
    payment.
    """

    n_periods: int
    occurrence: np.ndarray
    development: np.ndarray
    amount: np.ndarray
    counts: dict
    claim: np.ndarray | None = None
    claim_year: np.ndarray | None = None
    covariate: np.ndarray | None = None

    def __post_init__(self):
        occ = np.array(self.occurrence, dtype=int)
        dev = np.array(self.development, dtype=int)
        amount = np.array(self.amount, dtype=float)
        n = occ.size
        if dev.size != n or amount.size != n:
            raise ValueError("payment arrays must share one length")
        if np.any(amount < 0):
            raise ValueError("payment amounts must be non-negative")
        if np.any(occ + dev > self.n_periods + 1) or np.any(occ < 1) or np.any(dev < 1):
            raise ValueError("payments must sit in the observed region")
        counts = dict(self.counts)
        if any(c < 1 for c in counts.values()):
            raise ValueError("every cluster needs at least one payment")
        if sum(counts.values()) != n:
            raise ValueError("cluster counts do not match the number of payments")
        arrays = [occ, dev, amount]
        claim = self.claim
        if claim is not None:
            claim = np.array(claim, dtype=int)
            if claim.size != n:
                raise ValueError("claim ids must match the number of payments")
            if self.claim_year is None:
                raise ValueError("claim ids need a claim_year table")
            arrays.append(claim)
        claim_year = self.claim_year
        if claim_year is not None:
            claim_year = np.array(claim_year, dtype=int)
            if claim is not None and claim.size and claim.max() >= claim_year.size:
                raise ValueError("claim id outside the claim_year table")
            arrays.append(claim_year)
        covariate = self.covariate
        if covariate is not None:
            covariate = np.array(covariate, dtype=float)
            if covariate.size != n:
                raise ValueError("covariate must match the number of payments")
            arrays.append(covariate)
        for arr in arrays:
            arr.setflags(write=False)
        object.__setattr__(self, "occurrence", occ)
        object.__setattr__(self, "development", dev)
        object.__setattr__(self, "amount", amount)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "claim", claim)
        object.__setattr__(self, "claim_year", claim_year)
        object.__setattr__(self, "covariate", covariate)

    @property
    def n_payments(self) -> int:
        return self.amount.size

    def cells(self):
        return [(int(i), int(j)) for i, j in zip(self.occurrence, self.development)]

    def cluster_totals(self) -> dict:
        totals = {}
        for cell, amount in zip(self.cells(), self.amount):
            totals[cell] = totals.get(cell, 0.0) + float(amount)
        return totals

    def offsets(self) -> np.ndarray:
        """Per-payment exposure offset log(1/n_g)."""
        return np.log(np.array([1.0 / self.counts[c] for c in self.cells()]))

    def design(self) -> np.ndarray:
        """Cross-classified payment design, plus the covariate column if any."""
        return cross_classified_design(self.cells(), self.n_periods, extra=self.covariate)

    def claims_per_year(self) -> dict:
        """Number of allocated claims per occurrence period (variant G)."""
        if self.claim_year is None:
            raise ValueError("dataset has no claim allocation")
        years, counts = np.unique(self.claim_year, return_counts=True)
        return {int(y): int(c) for y, c in zip(years, counts)}


@dataclass(frozen=True)
class SimConfig:
    """Configuration of one disaggregation experiment.

    ``theta`` is the expected payment count per cluster. ``rho`` is the
    target correlation of the injected covariate; when omitted it defaults
    to 0 for variant E and 0.8 for variant F.
    """

    theta: float
    replicates: int = 1
    seed: int = 0
    variant: str = "C"
    rho: float | None = None
    max_failure_share: float = 0.05

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.rho is not None and not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def resolved_rho(self) -> float:
        if self.rho is not None:
            return float(self.rho)
        return {"E": 0.0, "F": 0.8}.get(self.variant, 0.0)

    @property
    def family(self) -> str:
        return POISSON if self.variant in ("C", "G") else QUASIPOISSON


def split_cluster(amount: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Split an amount into ``count`` floored shares, uniform on the simplex.

    Proportions are symmetric Dirichlet(1); each share is floored to a
    whole unit, so the shares sum to within ``count - 1`` units below the
    original amount.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if amount < 0:
        raise ValueError("amount must be non-negative")
    if count == 1:
        return np.array([np.floor(amount)])
    weights = rng.dirichlet(np.ones(count))
    return np.floor(weights * amount)


def disaggregate(triangle: Triangle, config: SimConfig, rng: np.random.Generator) -> MicroDataset:
    """Simulate individual payments for every observed cluster.

    Payment counts are zero-truncated Poisson(theta) draws (an observed
    positive amount implies at least one payment; a zero-amount cluster
    gets a single zero payment). Variant G additionally allocates each
    payment to a claim: occurrence period i carries as many claims as the
    simulated payment count of cluster (i, 1), and each payment of that
    period picks one of them uniformly.
    """
    if triangle.kind != INCREMENTAL:
        raise ValueError("disaggregation expects an incremental triangle")
    sets = index_sets(triangle)
    occ, dev, amounts = [], [], []
    counts = {}
    for (i, j) in sets.observed:
        value = triangle.cell(i, j)
        if value < 0:
            raise ValueError(f"negative amount in cluster ({i}, {j})")
        if value == 0:
            n = 1
            shares = np.array([0.0])
        else:
            n = 0
            while n == 0:
                n = int(rng.poisson(config.theta))
            shares = split_cluster(value, n, rng)
        counts[(i, j)] = n
        occ.extend([i] * n)
        dev.extend([j] * n)
        amounts.extend(shares)

    claim = claim_year = None
    if config.variant == "G":
        n_claims = {i: counts[(i, 1)] for i in range(1, triangle.n_periods + 1)}
        base, start = {}, 0
        for i in range(1, triangle.n_periods + 1):
            base[i] = start
            start += n_claims[i]
        claim_year = np.concatenate(
            [np.full(n_claims[i], i) for i in range(1, triangle.n_periods + 1)]
        )
        claim = np.array([base[i] + rng.integers(n_claims[i]) for i in occ])

    return MicroDataset(
        n_periods=triangle.n_periods,
        occurrence=np.array(occ),
        development=np.array(dev),
        amount=np.array(amounts),
        counts=counts,
        claim=claim,
        claim_year=claim_year,
    )


def attach_covariate(dataset: MicroDataset, rho: float, rng: np.random.Generator) -> MicroDataset:
    """Add one payment-level covariate with target correlation ``rho``.

    The covariate blends the standardized log-amounts with independent
    Gaussian noise so its sample correlation with log(amount + 1)
    converges to ``rho``. Amounts that are all equal leave nothing to
    correlate with, which is an error for nonzero ``rho``.
    """
    if not -1.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [-1, 1]")
    n = dataset.n_payments
    if rho == 0.0:
        covariate = rng.standard_normal(n)
    else:
        log_amount = np.log(dataset.amount + 1.0)
        sd = log_amount.std()
        if sd <= 1e-12 * max(1.0, abs(log_amount.mean())):
            raise ValueError("amounts are degenerate; cannot achieve nonzero correlation")
        z = (log_amount - log_amount.mean()) / sd
        covariate = rho * z + np.sqrt(1.0 - rho**2) * rng.standard_normal(n)
    return dataclasses.replace(dataset, covariate=covariate)


def fit_micro_model(dataset: MicroDataset, family: str = POISSON) -> GlmFit:
    """Fit the payment-level cross-classified GLM with offsets log(1/n_g)."""
    spec = GlmSpec(y=dataset.amount, X=dataset.design(), offset=dataset.offsets(), family=family)
    return fit_glm(spec)


def fit_macro_on_totals(
    dataset: MicroDataset, family: str = POISSON
) -> GlmFit:
    """Fit the macro model to the dataset's realized cluster totals.

    This is the aggregation counterpart of :func:`fit_micro_model`: with
    no covariate column the two share their coefficient vector exactly.
    """
    sets = CellIndexSets.for_periods(dataset.n_periods)
    totals = dataset.cluster_totals()
    y = np.array([totals[c] for c in sets.observed])
    X = cross_classified_design(sets.observed, dataset.n_periods)
    return fit_glm(GlmSpec(y=y, X=X, family=family))


class MicroGlmReserver:
    """Micro-level (quasi-)Poisson reserving on individual payments.

    Model C is the Poisson family, model D quasi-Poisson; datasets that
    carry a covariate column fit it as one extra design column (models
    E/F). The API mirrors :class:`reservelab.reserve.GlmReserver`.
    """

    def __init__(self, family: str = POISSON, model_tag: str | None = None):
        self.family = family
        self.model_tag = model_tag

    def get_params(self, deep=True):
        return {"family": self.family, "model_tag": self.model_tag}

    def set_params(self, **params):
        for key, value in params.items():
            if key not in ("family", "model_tag"):
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    def fit(self, dataset: MicroDataset, y=None):
        if not isinstance(dataset, MicroDataset):
            raise TypeError("MicroGlmReserver.fit expects a MicroDataset")
        tag = self.model_tag
        if tag is None:
            tag = "C" if self.family == POISSON else "D"
        self.sets_ = CellIndexSets.for_periods(dataset.n_periods)
        self.glm_ = fit_micro_model(dataset, family=self.family)
        self.reserve_ = msep_unconditional(self.glm_, self.sets_, model=tag)
        self.dispersion_ = self.glm_.dispersion
        self.best_estimate_ = self.reserve_.best_estimate
        self.msep_ = self.reserve_.msep
        self.sqrt_msep_ = self.reserve_.sqrt_msep
        return self

    def predict(self, cells=None):
        if not hasattr(self, "reserve_"):
            raise ValueError("estimator is not fitted")
        if cells is None:
            return np.array([v for _, v in self.reserve_.cell_predictions])
        return np.array([self.reserve_.prediction(c) for c in cells])


# ---------------------------------------------------------------------------
# Replicated experiments


@dataclass(frozen=True)
class ReplicateRecord:
    """Outcome of one disaggregation replicate."""

    index: int
    n_payments: int
    best_estimate: float
    msep: float
    sqrt_msep: float
    phi_micro: float
    phi_macro_split: float
    macro_best_estimate: float
    psi: float
    psi_threshold: float
    psi_verdict: bool
    psi_consistent: bool | None


@dataclass(frozen=True)
class SimSummary:
    """Replicate records plus their arithmetic means for one sweep point."""

    config: SimConfig
    n_periods: int
    expected_payments: float
    records: tuple
    failures: tuple
    mean_best_estimate: float
    mean_msep: float
    std_msep: float
    mean_sqrt_msep: float
    mean_phi_micro: float
    macro_reference: ReserveEstimate


def _run_replicate(triangle, config, sets, index) -> ReplicateRecord:
    rng = child_rng(config.seed, index)
    dataset = disaggregate(triangle, config, rng)
    if config.variant in ("E", "F"):
        dataset = attach_covariate(dataset, config.resolved_rho, rng)
    micro_fit = fit_micro_model(dataset, family=config.family)
    micro_est = msep_unconditional(micro_fit, sets, model=config.variant)
    macro_fit = fit_macro_on_totals(dataset, family=config.family)
    macro_tag = "A" if config.family == POISSON else "B"
    macro_est = msep_unconditional(macro_fit, sets, model=macro_tag)
    psi = psi_comparison(micro_fit, macro_fit)
    quasi = config.family == QUASIPOISSON
    comparison = compare_micro_macro(macro_est, micro_est, psi=psi if quasi else None)
    return ReplicateRecord(
        index=index,
        n_payments=dataset.n_payments,
        best_estimate=micro_est.best_estimate,
        msep=micro_est.msep,
        sqrt_msep=micro_est.sqrt_msep,
        phi_micro=psi.phi_micro,
        phi_macro_split=psi.phi_macro,
        macro_best_estimate=macro_est.best_estimate,
        psi=psi.psi,
        psi_threshold=psi.threshold,
        psi_verdict=psi.micro_leq_macro,
        psi_consistent=comparison.psi_consistent,
    )


def run_experiment(triangle: Triangle, config: SimConfig, threads: int = 1) -> SimSummary:
    """Disaggregate, refit and summarize over ``config.replicates`` replicates.

    Replicate ``r`` draws from a child generator seeded by (seed, r), so
    the summary is identical for any worker count. Replicates whose fit
    fails are recorded and excluded; more than ``config.max_failure_share``
    failures abort the experiment.
    """
    if config.variant == "G":
        raise ValueError("variant G runs through the mixed-model experiment")
    sets = index_sets(triangle)
    macro_tag = "A" if config.family == POISSON else "B"
    macro_fit = fit_macro_model(triangle, family=config.family)
    macro_reference = msep_unconditional(macro_fit, sets, model=macro_tag)

    def one(index):
        try:
            return _run_replicate(triangle, config, sets, index)
        except (ReserveLabError, np.linalg.LinAlgError) as exc:
            return (index, f"{type(exc).__name__}: {exc}")

    threads = resolve_threads(threads)
    indexes = range(config.replicates)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one, indexes))
    else:
        outcomes = [one(index) for index in indexes]

    records = tuple(sorted((o for o in outcomes if isinstance(o, ReplicateRecord)),
                           key=lambda r: r.index))
    failures = tuple(sorted((o for o in outcomes if not isinstance(o, ReplicateRecord))))
    if len(failures) > config.max_failure_share * config.replicates:
        raise ExperimentError(
            f"{len(failures)} of {config.replicates} replicates failed: {failures[0][1]}"
        )
    msep = np.array([r.msep for r in records])
    return SimSummary(
        config=config,
        n_periods=triangle.n_periods,
        expected_payments=config.theta * len(sets.observed),
        records=records,
        failures=failures,
        mean_best_estimate=float(np.mean([r.best_estimate for r in records])),
        mean_msep=float(msep.mean()),
        std_msep=float(msep.std(ddof=1)) if len(records) > 1 else 0.0,
        mean_sqrt_msep=float(np.mean([r.sqrt_msep for r in records])),
        mean_phi_micro=float(np.mean([r.phi_micro for r in records])),
        macro_reference=macro_reference,
    )


def emit_figure_data(summaries) -> list:
    """Rows of figure data for a sweep of summaries.

    One row per sweep point: expected payment count, mean square-root
    MSEP, the mean MSEP with its +/- 2 standard deviation band, and the
    macro reference. Needs at least two sweep points.
    """
    summaries = sorted(summaries, key=lambda s: s.expected_payments)
    if len(summaries) < 2:
        raise ValueError("a sweep needs at least two theta values")
    rows = []
    for s in summaries:
        rows.append(
            {
                "model": s.config.variant,
                "expected_payments": s.expected_payments,
                "mean_sqrt_msep": s.mean_sqrt_msep,
                "mean_msep": s.mean_msep,
                "msep_band_low": s.mean_msep - 2.0 * s.std_msep,
                "msep_band_high": s.mean_msep + 2.0 * s.std_msep,
                "macro_msep": s.macro_reference.msep,
                "macro_sqrt_msep": s.macro_reference.sqrt_msep,
            }
        )
    return rows


FIGURE_COLUMNS = (
    "model",
    "expected_payments",
    "mean_sqrt_msep",
    "mean_msep",
    "msep_band_low",
    "msep_band_high",
    "macro_msep",
    "macro_sqrt_msep",
)


def figure_csv(summaries) -> str:
    """Figure data serialized as CSV (full float precision)."""
    rows = emit_figure_data(summaries)
    lines = [",".join(FIGURE_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in FIGURE_COLUMNS))
    return "\n".join(lines) + "\n"
