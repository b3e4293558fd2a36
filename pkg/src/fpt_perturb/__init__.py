from .core import (
    Direction,
    Ensemble,
    SurvivalCurve,
    Target,
    Trajectory,
    conditional_metric_stats,
    estimate_survival,
    extract_fpt,
    mean_fpt,
    partial_sum,
)
from .perturb import PerturbationKind, PerturbationSpec, StateVector, apply
from .predictor import (
    DIVERGENT,
    PredictionCurve,
    predict_general,
    predict_rare,
    predict_sr,
    rank_perturbations,
    speedup,
)
from .processes import ProcessKind, ProcessSpec
from .qss import detect_relaxation, ks_pvalue, ks_statistic
from .simulate import Protocol, ResidualSample, mean_residual, measure_residuals, simulate_ensemble

__all__ = [
    "DIVERGENT",
    "Direction",
    "Ensemble",
    "PerturbationKind",
    "PerturbationSpec",
    "PredictionCurve",
    "ProcessKind",
    "ProcessSpec",
    "Protocol",
    "ResidualSample",
    "StateVector",
    "SurvivalCurve",
    "Target",
    "Trajectory",
    "apply",
    "conditional_metric_stats",
    "detect_relaxation",
    "estimate_survival",
    "extract_fpt",
    "ks_pvalue",
    "ks_statistic",
    "mean_fpt",
    "mean_residual",
    "measure_residuals",
    "partial_sum",
    "predict_general",
    "predict_rare",
    "predict_sr",
    "rank_perturbations",
    "simulate_ensemble",
    "speedup",
]
