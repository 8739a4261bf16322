"""Stratum-specific pairwise treatment contrasts behind an intermediate
variable: plug-in, triply robust, and cross-fitted U-statistic estimators
with bootstrap inference, a monotonicity sensitivity analysis, and a
replication harness."""

from .core import (
    BUILTIN_CONTRASTS,
    DIFFERENCE,
    GEQ_INDICATOR,
    WIN_PAIR,
    ContrastFunction,
    Dataset,
    EstimandSpec,
    EstimateReport,
    Observation,
    OutcomeKind,
    StratumId,
    Summary,
    component_names,
    contrast_by_name,
    eval_contrast,
    read_csv_dataset,
    summarize_estimand,
    validate_dataset,
)
from . import errors
from .errors import PrincipalPairsError
from .estimators import (
    KernelContext,
    PairPartition,
    PLUGIN_MODES,
    dml_estimate,
    estimate_pz_dr,
    kernel_g,
    make_kernel_context,
    partition_pairs,
    plugin_estimate,
    psi_dz,
    psi_dz_values,
    tr_estimate,
)
from .inference import (
    BootstrapResult,
    OracleTruth,
    attach_bootstrap,
    bootstrap_ci,
    estimator_closure,
    mc_oracle_truth,
    summary_interval,
)
from .nuisance import (
    IntermediateModel,
    LearnerSpec,
    NuisanceBundle,
    NuisanceSpec,
    NuisanceSubset,
    PairwiseMeanModel,
    PrincipalScores,
    PropensityModel,
    fit_gaussian_outcome,
    fit_logistic,
    fit_nuisance_bundle,
    fit_nuisance_subset,
    fit_ordinal_outcome,
    learner_kinds,
    ordinal_category_probs,
    pairwise_mean_gaussian,
    pairwise_mean_ordinal,
    predict_principal_scores,
    register_learner,
)
from .sensitivity import (
    SensitivityFunction,
    eta_feasible_bound,
    eta_principal_scores,
    sensitivity_estimate,
)
from .simulation import (
    DgpSpec,
    PotentialTable,
    ScenarioSpec,
    ScenarioResult,
    gen_dgp,
    gen_dgp_gaussian,
    gen_dgp_ordinal,
    oracle_nuisance_bundle,
    run_scenario,
    transform_covariates,
)

__version__ = "0.1.0"
