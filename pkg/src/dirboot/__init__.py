"""Inference for directionally differentiable functionals.

Plug-in test statistics, resampling laws (standard and derivative-composed),
bootstrap-failure diagnostics, convex-projection tests, and a reproducible
quantile-regression simulation harness.
"""

from .bootstrap import (
    DEGENERATE_LAW_TOL,
    BootstrapEnsemble,
    ResampleScheme,
    bootstrap_ensemble,
    draw_resample_weights,
    ensemble_from_csv,
    ensemble_to_csv,
    law_degeneracy,
    run_test,
    statistic_law,
    substream,
)
from .cli import (
    RunConfig,
    UsageError,
    dispatch,
    main,
    parse_config,
    rerun_from_manifest,
)
from .core import (
    EmpiricalLaw,
    EstimateBundle,
    GridFunction,
    TestReport,
    directional_derivative_check,
    empirical_law_from_csv,
    empirical_law_to_csv,
    empirical_quantile,
    grid_function_from_csv,
    grid_function_to_csv,
    invert_test_for_ci,
    law_distance,
    make_test_report,
    plug_in_statistic,
)
from .derivatives import (
    AbsMean,
    ConvexDistance,
    DerivativeEstimate,
    DerivativeTuning,
    MaxCoord,
    StochDomCvM,
    certificate_norm,
    estimate_derivative,
    eval_derivative,
    eval_functional,
    invariance_probe,
    local_limit_law_max,
    probe_table_to_csv,
)
from .lp import (
    FEASIBILITY_TOL,
    LinearProgramError,
    SimplexResult,
    bl_lp_reference,
    chain_lp_max,
    dense_simplex,
)
from .projection import (
    Box,
    ConeSpec,
    ConvexSet,
    HalfspaceIntersection,
    MonotoneCone,
    NonpositiveOrthant,
    ProjectionError,
    derivative_sup_estimate,
    distance_statistic,
    isotonic_fit,
    project,
    project_tangent,
    run_projection_test,
    tangent_cone,
)
from .qr import (
    QRSolveError,
    negative_residual_count,
    qr_lp_reference,
    qr_objective,
    solve_qr_path,
    solve_weighted_qr,
)
from .quantile_sim import (
    MonteCarloTable,
    QRFit,
    QuantileSimConfig,
    TreatmentSample,
    limit_law_calibration,
    monotonicity_test,
    qr_bootstrap_ensemble,
    qr_fit,
    run_monte_carlo,
    simulate_dgp,
    theoretical_local_rejection,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # core containers and test reports
    "GridFunction",
    "EstimateBundle",
    "EmpiricalLaw",
    "TestReport",
    "plug_in_statistic",
    "empirical_quantile",
    "law_distance",
    "directional_derivative_check",
    "invert_test_for_ci",
    "make_test_report",
    "empirical_law_to_csv",
    "empirical_law_from_csv",
    "grid_function_to_csv",
    "grid_function_from_csv",
    # linear programming kernels
    "LinearProgramError",
    "SimplexResult",
    "dense_simplex",
    "chain_lp_max",
    "bl_lp_reference",
    "FEASIBILITY_TOL",
    # resampling
    "ResampleScheme",
    "BootstrapEnsemble",
    "substream",
    "draw_resample_weights",
    "bootstrap_ensemble",
    "statistic_law",
    "run_test",
    "law_degeneracy",
    "ensemble_to_csv",
    "ensemble_from_csv",
    "DEGENERATE_LAW_TOL",
    # convex projections and cone tests
    "ConvexSet",
    "NonpositiveOrthant",
    "Box",
    "MonotoneCone",
    "HalfspaceIntersection",
    "ConeSpec",
    "ProjectionError",
    "project",
    "distance_statistic",
    "tangent_cone",
    "project_tangent",
    "derivative_sup_estimate",
    "run_projection_test",
    "isotonic_fit",
    # quantile regression
    "QRSolveError",
    "qr_objective",
    "solve_weighted_qr",
    "solve_qr_path",
    "qr_lp_reference",
    "negative_residual_count",
    # functionals and their derivatives
    "AbsMean",
    "MaxCoord",
    "StochDomCvM",
    "ConvexDistance",
    "DerivativeTuning",
    "DerivativeEstimate",
    "eval_functional",
    "eval_derivative",
    "estimate_derivative",
    "certificate_norm",
    "local_limit_law_max",
    "invariance_probe",
    "probe_table_to_csv",
    # simulation harness
    "QuantileSimConfig",
    "TreatmentSample",
    "QRFit",
    "simulate_dgp",
    "qr_fit",
    "qr_bootstrap_ensemble",
    "monotonicity_test",
    "MonteCarloTable",
    "run_monte_carlo",
    "theoretical_local_rejection",
    "limit_law_calibration",
    # command line
    "RunConfig",
    "UsageError",
    "parse_config",
    "dispatch",
    "rerun_from_manifest",
    "main",
]
