"""Fast quantile regression with sample selection (Gaussian copula)."""

from .bootstrap import (
    BandTable,
    BootstrapDraw,
    BootstrapError,
    bootstrap_qrs,
    confidence_bands,
    draw_weights,
)
from .copula import CopulaModel, bvn_cdf, conditional_copula, copula_cdf, rotated_quantiles
from .preprocess import ProcessError, ProcessResult, rqr_process, solve_preprocessed
from .propensity import PerfectSeparationError, PropensityModel, fit_logit, predict_propensity
from .qrs import (
    ALGORITHMS,
    InstrumentConfig,
    QrsFit,
    estimate,
    estimate_qrs_baseline,
    estimate_qrs_reduced,
    estimate_qrs_refined,
    estimate_qrs_repeated,
    qrs_objective,
)
from .rqr import RqrProblem, RqrSolution, solve_full, solve_interior_point
from .simulation import DgpConfig, Truth, numerical_diagnostics, run_benchmark, simulate_dgp
from .types import (
    CopulaParamGrid,
    DataValidationError,
    Dataset,
    EstimationConfig,
    QuantileGrid,
    SolverConfig,
    load_config,
    read_csv,
    validate_dataset,
    write_csv,
)

__all__ = [
    "ALGORITHMS", "BandTable", "BootstrapDraw", "BootstrapError", "CopulaModel", "CopulaParamGrid",
    "DataValidationError", "Dataset", "DgpConfig", "EstimationConfig", "InstrumentConfig",
    "PerfectSeparationError", "ProcessError", "ProcessResult", "PropensityModel", "QrsFit", "QuantileGrid",
    "RqrProblem", "RqrSolution", "SolverConfig", "Truth", "bootstrap_qrs", "bvn_cdf", "conditional_copula",
    "confidence_bands", "copula_cdf", "draw_weights", "estimate", "estimate_qrs_baseline",
    "estimate_qrs_reduced", "estimate_qrs_refined", "estimate_qrs_repeated", "fit_logit", "load_config",
    "numerical_diagnostics", "predict_propensity", "qrs_objective", "read_csv", "rotated_quantiles",
    "rqr_process", "run_benchmark", "simulate_dgp", "solve_full", "solve_interior_point", "solve_preprocessed",
    "validate_dataset", "write_csv",
]
