"""Weighted GEE estimators for cluster trials with multi-level missing outcomes."""

__version__ = "0.1.0"

from .data_model import (
    ClusteredDataset,
    Level,
    MissingnessSummary,
    Nesting,
    UnitRecord,
    derive_missingness,
    load_dataset,
    serialize_dataset,
)
from .em_misclass import (
    EMFit,
    e_step_posteriors,
    fit_em,
    m_step,
    naive_fits,
    observed_data_loglik,
)
from .formulas import DesignMatrix, Formula, build_design_matrix, parse_formula
from .gee import (
    FitConfig,
    FitResult,
    Link,
    MarginalModel,
    WeightMethod,
    WeightSpec,
    WorkingCorrelation,
    build_weight_spec,
    estimate_alpha,
    fit_marginal,
    solve_gee,
)
from .inference import (
    BootstrapResult,
    MethodSummary,
    cluster_bootstrap,
    summarize_study,
)
from .mr_weights import (
    ConstraintVectors,
    MRWeightSolution,
    calibrated_weights,
    constraint_vectors,
    multiplier_from_dual,
    solve_conditional_probabilities,
    solve_mr_weights,
    solve_multiplier,
)
from .propensity import (
    MomentTargets,
    PropensityFit,
    PropensityModelSet,
    evaluate_ps,
    expit,
    fit_logistic,
    moment_targets,
    unit_probabilities,
)
from .simulate import (
    Scenario,
    SizeLaw,
    StudySummary,
    builtin_scenarios,
    generate_dataset,
    get_scenario,
    method_config,
    ps_parameter_study,
    run_study,
)

__all__ = [name for name in dir() if not name.startswith("_")]
