"""Stochastic claims reserving at macro and micro level.

Run-off triangle models (cross-classified Poisson and quasi-Poisson, Mack
chain ladder), Monte-Carlo disaggregation of a triangle into individual
payments, and a mixed-Poisson model with a claim-level random intercept.
"""

from .errors import (
    ConvergenceError,
    DegenerateFitError,
    ExperimentError,
    IdentifiabilityError,
    KindMismatchError,
    PredictionError,
    ReserveLabError,
    SingularDesignError,
    TriangleFormatError,
)
from .glm import (
    GlmFit,
    GlmSpec,
    PsiComparison,
    coefficient_covariance,
    cross_classified_design,
    fit_glm,
    pearson_dispersion,
    psi_comparison,
)
from .linmodel import (
    ClusteredLinearData,
    LinearFit,
    fit_ols_micro,
    fit_wls_macro,
)
from .microsim import (
    MicroDataset,
    MicroGlmReserver,
    SimConfig,
    SimSummary,
    attach_covariate,
    disaggregate,
    emit_figure_data,
    run_experiment,
    split_cluster,
)
from .mixed import (
    LrtResult,
    MixedFit,
    MixedPoissonReserver,
    MixedSpec,
    fit_mixed,
    lrt_variance,
    marginal_moments,
    predict_reserve,
    run_mixed_experiment,
)
from .reserve import (
    GlmReserver,
    MackChainLadder,
    MackFit,
    ModelComparison,
    ReserveEstimate,
    best_estimate,
    compare_micro_macro,
    fit_macro_model,
    mack,
    msep_unconditional,
)
from .triangle import (
    CellIndexSets,
    Triangle,
    index_sets,
    load_triangle,
    to_cumulative,
    to_incremental,
)

__version__ = "0.1.0"

__all__ = [
    "CellIndexSets",
    "ClusteredLinearData",
    "ConvergenceError",
    "DegenerateFitError",
    "ExperimentError",
    "GlmFit",
    "GlmReserver",
    "GlmSpec",
    "IdentifiabilityError",
    "KindMismatchError",
    "LinearFit",
    "LrtResult",
    "MackChainLadder",
    "MackFit",
    "MicroDataset",
    "MicroGlmReserver",
    "MixedFit",
    "MixedPoissonReserver",
    "MixedSpec",
    "ModelComparison",
    "PredictionError",
    "PsiComparison",
    "ReserveEstimate",
    "ReserveLabError",
    "SimConfig",
    "SimSummary",
    "SingularDesignError",
    "Triangle",
    "TriangleFormatError",
    "attach_covariate",
    "best_estimate",
    "coefficient_covariance",
    "compare_micro_macro",
    "cross_classified_design",
    "disaggregate",
    "emit_figure_data",
    "fit_glm",
    "fit_macro_model",
    "fit_mixed",
    "fit_ols_micro",
    "fit_wls_macro",
    "index_sets",
    "load_triangle",
    "lrt_variance",
    "mack",
    "marginal_moments",
    "msep_unconditional",
    "pearson_dispersion",
    "predict_reserve",
    "psi_comparison",
    "run_experiment",
    "run_mixed_experiment",
    "split_cluster",
    "to_cumulative",
    "to_incremental",
]
