"""Historical-control comparative effectiveness toolkit.

Builds treated/comparison cohorts from longitudinal registry data,
reweights comparisons by per-stratum entropy balancing, and estimates
treatment effects with robust inference, sensitivity bounds, placebo
diagnostics and a discrete-time mortality model.  A synthetic registry
generator with known ground truth supports end-to-end validation.
"""

from .balancing import (
    BalanceReport,
    CommonSupportError,
    ConstraintSpec,
    WeightSolution,
    balance_all,
    balance_stratum,
    kl_divergence,
    solve_dual,
    standardized_mean_differences,
)
from .cohorts import (
    NAM_ATC_CODES,
    EligibilityConfig,
    censor_dead_controls,
    select_cohorts,
)
from .covariates import (
    TrajectoryPanel,
    adt_cumulative_ddd,
    adt_status,
    build_prediagnosis,
    build_trajectory,
    impute_education,
    impute_education_all,
    prediagnosis_frame,
    trajectory_frame,
    visit_windows,
)
from .elixhauser import elixhauser, elixhauser_category, elixhauser_groups
from .estimation import (
    BONFERRONI_FAMILY,
    DEFAULT_HORIZON,
    EffectEstimate,
    HazardFit,
    OutcomePanel,
    PlaceboResult,
    bonferroni,
    derive_outcomes,
    fit_cll,
    morbidity_bounds,
    placebo_test,
    subgroup_analysis,
    uniform_stratum_weights,
    wls_atet,
)
from .factors import (
    FactorModel,
    fit_factor_model,
    render_factor_table,
    score_factors,
    tucker_congruence,
)
from .io import (
    export_registry_csv,
    load_cohorts,
    load_ground_truth,
    load_registry,
    write_cohorts,
    write_ground_truth,
    write_registry,
)
from .pipeline import (
    AnalysisSettings,
    BalanceSettings,
    PipelineConfig,
    RunReport,
    StageError,
    run_pipeline,
    write_report,
)
from .records import (
    CohortAssignment,
    Demographics,
    InpatientVisit,
    PatientRecord,
    Prescription,
    Registry,
    RegistryError,
    RowError,
    SocioPanel,
)
from .simulate import (
    AssignmentParams,
    GroundTruth,
    OutcomeParams,
    ProgressionParams,
    ScenarioConfig,
    TrueEffects,
    generate,
)

__version__ = "1.0.0"
