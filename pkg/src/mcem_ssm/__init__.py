"""MCEM for state space models with missing lagged outcomes."""

from .baselines import (
    STRATEGIES,
    FitSummary,
    ImputedDataset,
    StrategyConfig,
    analyze_ols,
    analyze_ssm,
    complete_case_filter,
    fit_strategy,
    impute,
    impute_arima,
    impute_mice,
    pool_rubin,
    select_arima,
)
from .changepoint import Segmentation, choose_penalty, detect_changepoints
from .dgp import DGPConfig, simulate_dgp
from .errors import ConfigError, DataError, MCEMError, NumericalError
from .kernels import BACKEND
from .mcem import MCEMConfig, MCEMResult, e_step, m_step, run_mcem
from .missingness import MechanismConfig, MissingPattern, calibrate_intercept, generate_mask, partition_timepoints
from .model import Design, ModelSpec, Theta, TimeSeriesDataset, build_design
from .simulator import ScenarioResult, compute_metrics, run_replicate, run_scenario
from .ssm import complete_data_loglik, ffbs_sample, kalman_filter, kalman_smoother, predict_missing_outcome

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DGPConfig",
    "DataError",
    "Design",
    "FitSummary",
    "ImputedDataset",
    "MCEMConfig",
    "MCEMError",
    "MCEMResult",
    "MechanismConfig",
    "MissingPattern",
    "ModelSpec",
    "NumericalError",
    "STRATEGIES",
    "ScenarioResult",
    "Segmentation",
    "StrategyConfig",
    "Theta",
    "TimeSeriesDataset",
    "analyze_ols",
    "analyze_ssm",
    "build_design",
    "calibrate_intercept",
    "choose_penalty",
    "complete_case_filter",
    "complete_data_loglik",
    "compute_metrics",
    "detect_changepoints",
    "e_step",
    "ffbs_sample",
    "fit_strategy",
    "generate_mask",
    "impute",
    "impute_arima",
    "impute_mice",
    "kalman_filter",
    "kalman_smoother",
    "m_step",
    "partition_timepoints",
    "pool_rubin",
    "predict_missing_outcome",
    "run_mcem",
    "run_replicate",
    "run_scenario",
    "select_arima",
    "simulate_dgp",
]
