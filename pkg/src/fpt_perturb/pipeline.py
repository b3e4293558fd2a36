"""Batch pipeline steps behind the CLI: simulate, survival, qss, stats, measure-tau,
tau-sweep, predict, validate and oracle.

Every step validates its inputs and computes its results before the output
directory is touched, so a failing step leaves no partial artifacts.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import RunConfig
from .core import MetricStats, SurvivalCurve, centered_metric_stats, conditional_metric_stats, estimate_survival, fpt_sample, mean_fpt
from .errors import (
    CensoredBaselineError,
    EmptyConditionalError,
    NonAbsorbingError,
    UsageError,
)
from .formats import (
    FORMAT_VERSION,
    MANIFEST_FILE,
    ORACLE_HEADER,
    PREDICTION_HEADER,
    QSS_HEADER,
    QSS_REFERENCE_HEADER,
    TAU_HEADER,
    TAU_SWEEP_HEADER,
    TRAJECTORIES_FILE,
    VALIDATE_HEADER,
    Manifest,
    TauRow,
    quantile_column,
    read_ensemble,
    read_survival,
    read_tau,
    write_csv,
    write_json,
    write_survival,
    write_trajectories,
)
from .oracle import ChainModel, exact_perturbed_mfpt, exact_residual, exact_survival
from .perturb import PerturbationSpec
from .predictor import (
    DIVERGENT,
    PredictionCurve,
    TauSource,
    baseline_from_curve,
    best_interval,
    predict_rare_from_tau,
    predict_sr_curve,
    rank_perturbations,
    speedup,
)
from .qss import QssReport, default_window, detect_relaxation
from .simulate import (
    Protocol,
    ResidualSample,
    measure_residuals_many,
    mean_residual,
    residual_stderr,
    simulate_ensemble,
    sweep_regime,
)
from .tracing import DecisionTraceEmitter, now_iso, trace_decision

logger = logging.getLogger(__name__)

SURVIVAL_FILE = "survival.csv"
QSS_FILE = "qss.csv"
QSS_REFERENCE_FILE = "qss_reference.csv"
TRAJSTATS_FILE = "trajstats.csv"
TAU_FILE = "tau.csv"
RESIDUAL_STATS_FILE = "residual_stats.csv"
TAU_SWEEP_FILE = "tau_sweep.csv"
PREDICTION_FILE = "prediction.csv"
VALIDATE_FILE = "validate.csv"
ORACLE_FILE = "oracle.csv"


@trace_decision("qss-detect")
def _relaxation_event(report: QssReport, n_trajectories: int) -> dict[str, Any]:
    tail = report.ks_pvalue[report.window[0] - 1 :]
    return {
        "decision_type": "RELAXATION_DETECTED",
        "context": {"window": list(report.window), "alpha": report.alpha, "n_trajectories": n_trajectories},
        "evidence": {
            "min_pvalue_in_window": float(tail.min()),
            "max_ks_in_window": float(report.ks_stat[report.window[0] - 1 :].max()),
            "reference_support_size": int(report.reference.support.size),
        },
        "outcome": {"t_r": report.t_r, "quasi_steady": report.t_r is not None},
    }


@trace_decision("measure-tau")
def _tau_event(name: str, spec: PerturbationSpec, sample: ResidualSample) -> dict[str, Any]:
    return {
        "decision_type": "TAU_MEASURED",
        "context": {"name": name, "perturbation": spec.to_mapping(), "p_star": sample.p_star},
        "evidence": {
            "n_survivors_at_pstar": sample.n_survivors_at_pstar,
            "n_absorbed": sample.n,
            "n_censored": sample.n_censored,
        },
        "outcome": {"tau_bar": None if sample.n_censored else mean_residual(sample)},
    }


@trace_decision("measure-tau")
def _ranking_event(p_star: int, ranked: list[Any], excluded: list[str], lineage: list[str]) -> dict[str, Any]:
    return {
        "decision_type": "PERTURBATIONS_RANKED",
        "context": {"p_star": p_star, "excluded_censored": excluded},
        "evidence": {"candidates": [{"name": r.name, "tau_bar": r.tau_bar, "stderr": r.stderr, "n": r.n} for r in ranked]},
        "outcome": {"preferred": ranked[0].name, "order": [r.name for r in ranked]},
        "lineage": lineage,
    }


@trace_decision("predict")
def _prediction_event(curve: PredictionCurve) -> dict[str, Any]:
    flags = curve.flags()
    return {
        "decision_type": "PREDICTION_COMPUTED",
        "context": {
            "name": curve.name,
            "method": curve.method.value,
            "p_grid": [curve.P_values[0], curve.P_values[-1], len(curve.P_values)],
        },
        "evidence": {
            "tau_bar": curve.tau_source.tau_bar if curve.tau_source else None,
            "baseline": curve.baseline.mean if curve.baseline else None,
            "n_divergent": flags.count("divergent"),
            "n_extrapolated": flags.count("extrapolated"),
        },
        "outcome": {"valid_range": list(curve.valid_range)},
    }


@trace_decision("predict")
def _interval_event(curve: PredictionCurve, lineage: list[str]) -> dict[str, Any]:
    best = best_interval(curve)
    return {
        "decision_type": "INTERVAL_SELECTED",
        "context": {"name": curve.name, "valid_range": list(curve.valid_range)},
        "evidence": {"n_candidates": sum(1 for f in curve.flags() if f == "ok")},
        "outcome": {
            "P": best.P if best else None,
            "e_tp": best.e_tp if best else None,
            "speedup": best.speedup if best else None,
        },
        "lineage": lineage,
    }


def _prepare(out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def run_simulate(config: RunConfig, threads: int = 1) -> Manifest:
    seed = config.require_seed()
    ensemble = simulate_ensemble(config.process, config.protocol, config.n_trajectories, seed, threads=threads)
    sample = fpt_sample(ensemble)
    manifest = Manifest(
        format_version=FORMAT_VERSION,
        config_digest=config.digest(),
        created=now_iso(),
        n_trajectories=ensemble.n,
        horizon=ensemble.horizon,
        n_absorbed=len(sample.times),
        n_censored=sample.n_censored,
        master_seed=seed,
        process_fingerprint=ensemble.process_fingerprint,
        target=ensemble.target.to_mapping(),
        process=config.process.to_mapping(),
        protocol=config.protocol.to_mapping(),
    )
    out = _prepare(config.output_dir)
    write_trajectories(out / TRAJECTORIES_FILE, ensemble)
    write_json(out / MANIFEST_FILE, manifest.to_mapping())
    return manifest


def run_survival(run_dir: Path, out_dir: Path | None = None) -> Path:
    ensemble, _ = read_ensemble(run_dir)
    curve = estimate_survival(ensemble)
    path = _prepare(out_dir or run_dir) / SURVIVAL_FILE
    write_survival(path, curve)
    if curve.fully_absorbed:
        logger.info("E[T] = %.6g over %d trajectories", mean_fpt(fpt_sample(ensemble)), ensemble.n)
    else:
        logger.info("%d trajectories censored at horizon %d", int(curve.at_risk[-1]), curve.horizon)
    return path


def run_qss(
    run_dir: Path,
    out_dir: Path | None = None,
    window: tuple[int, int] | None = None,
    alpha: float = 0.05,
    min_survivors: int = 20,
) -> QssReport:
    ensemble, manifest = read_ensemble(run_dir)
    if window is None:
        window = default_window(ensemble, min_survivors)
    report = detect_relaxation(ensemble, window, alpha)
    out = _prepare(out_dir or run_dir)
    write_csv(
        out / QSS_FILE,
        QSS_HEADER,
        zip(report.epochs.tolist(), report.ks_stat.tolist(), report.ks_pvalue.tolist(), report.cvm.tolist()),
    )
    write_csv(
        out / QSS_REFERENCE_FILE,
        QSS_REFERENCE_HEADER,
        zip(report.reference.support.tolist(), report.reference.cdf_values.tolist()),
    )
    with DecisionTraceEmitter(out, manifest.config_digest, "qss"):
        _relaxation_event(report, ensemble.n)
    return report


def _stats_rows(stats: MetricStats, prefix: Sequence[Any] = ()) -> list[list[Any]]:
    return [
        [*prefix, int(t), float(stats.mean[i]), *stats.quantile_values[i].tolist(), int(stats.at_risk[i])]
        for i, t in enumerate(stats.epochs)
    ]


def run_stats(run_dir: Path, quantiles: Sequence[float], out_dir: Path | None = None) -> Path:
    ensemble, _ = read_ensemble(run_dir)
    stats = conditional_metric_stats(ensemble, quantiles)
    header = ("t", "mean", *(quantile_column(q) for q in stats.quantiles), "at_risk")
    path = _prepare(out_dir or run_dir) / TRAJSTATS_FILE
    write_csv(path, header, _stats_rows(stats))
    return path


def _candidates(config: RunConfig) -> list[tuple[str, PerturbationSpec]]:
    if config.perturbations:
        return list(config.perturbations)
    if config.protocol.perturbation is not None:
        return [(config.protocol.perturbation.kind.value, config.protocol.perturbation)]
    raise UsageError("no candidate perturbations: add a perturbations list to the config")


def _residual_horizon(config: RunConfig) -> int:
    return config.analysis.residual_horizon or config.process.horizon


def run_measure_tau(config: RunConfig, threads: int = 1) -> list[TauRow]:
    seed = config.require_seed()
    p_star = config.analysis.p_star
    if p_star is None:
        raise UsageError("measure-tau needs --p-star or analysis.p_star")
    candidates = _candidates(config)
    samples = measure_residuals_many(
        config.process,
        dict(candidates),
        p_star,
        config.n_trajectories,
        seed,
        _residual_horizon(config),
        threads=threads,
        keep_paths=True,
    )
    usable = [(name, samples[name]) for name, _ in candidates if samples[name].n_censored == 0]
    excluded = [name for name, _ in candidates if samples[name].n_censored]
    if not usable:
        raise CensoredBaselineError(
            sum(s.n_censored for s in samples.values()), what="every candidate's mean residual time"
        )
    for name in excluded:
        logger.warning("%s: %d censored residuals; excluded from the ranking", name, samples[name].n_censored)
    ranked = rank_perturbations(usable)

    rows: list[TauRow] = []
    stats_rows: list[list[Any]] = []
    quantiles = config.analysis.quantiles
    for name, _ in candidates:
        sample = samples[name]
        censored = sample.n_censored > 0
        rows.append(
            TauRow(
                name=name,
                p_star=p_star,
                tau_bar=None if censored else mean_residual(sample),
                stderr=None if censored else residual_stderr(sample),
                n=sample.n,
                n_censored=sample.n_censored,
            )
        )
        stats = centered_metric_stats(sample.paths or (), sample.absorbed_flags(), quantiles, offset=p_star)
        stats_rows.extend(_stats_rows(stats, prefix=(name,)))

    out = _prepare(config.output_dir)
    write_csv(out / TAU_FILE, TAU_HEADER, ([r.name, r.p_star, r.tau_bar, r.stderr, r.n, r.n_censored] for r in rows))
    header = ("name", "s", "mean", *(quantile_column(q) for q in quantiles), "at_risk")
    write_csv(out / RESIDUAL_STATS_FILE, header, stats_rows)
    with DecisionTraceEmitter(out, config.digest(), "measure-tau"):
        lineage = [_tau_event(name, spec, samples[name])["decision_id"] for name, spec in candidates]
        _ranking_event(p_star, ranked, excluded, lineage)
    return rows


def run_tau_sweep(config: RunConfig, threads: int = 1) -> Path:
    seed = config.require_seed()
    grid = config.analysis.p_grid
    if not grid:
        raise UsageError("tau-sweep needs --p-grid or analysis.p_grid")
    candidates = _candidates(config)
    rows: list[list[Any]] = []
    for P in grid:
        try:
            samples = measure_residuals_many(
                config.process, dict(candidates), P, config.n_trajectories, seed, _residual_horizon(config), threads
            )
        except EmptyConditionalError:
            logger.warning("no survivors at P=%d; sweep rows left empty", P)
            rows.extend([name, P, None, None, 0, 0, "empty"] for name, _ in candidates)
            continue
        for name, _ in candidates:
            s = samples[name]
            tau = None if s.n_censored else mean_residual(s)
            rows.append([name, P, tau, None if tau is None else residual_stderr(s), s.n, s.n_censored, sweep_regime(s)])
    rows.sort(key=lambda r: (r[0], r[1]))
    path = _prepare(config.output_dir) / TAU_SWEEP_FILE
    write_csv(path, TAU_SWEEP_HEADER, rows)
    return path


@dataclass(frozen=True)
class PredictRequest:
    survival_path: Path
    out_dir: Path
    tau_path: Path | None = None
    sr: bool = False
    p_grid: tuple[int, ...] | None = None
    t_r: int | None = None
    baseline: float | None = None
    config_digest: str = ""


def _baseline(given: float | None, survival: SurvivalCurve) -> tuple[float, float] | None:
    if given is not None:
        return given, 0.0
    try:
        return baseline_from_curve(survival)
    except CensoredBaselineError as exc:
        logger.warning("no speedup column: %s; pass --baseline", exc)
        return None


def run_predict(request: PredictRequest) -> list[PredictionCurve]:
    if request.sr == (request.tau_path is not None):
        raise UsageError("predict takes exactly one of --sr or --tau")
    survival = read_survival(request.survival_path)
    curves: list[PredictionCurve] = []
    if request.sr:
        grid = request.p_grid or tuple(range(1, survival.horizon + 1))
        curves.append(predict_sr_curve(survival, grid))
    else:
        for row in read_tau(request.tau_path):  # type: ignore[arg-type]
            if row.tau_bar is None:
                raise CensoredBaselineError(row.n_censored, what=f"mean residual time of {row.name}")
            tau = TauSource(p_star=row.p_star, tau_bar=row.tau_bar, stderr=row.stderr if row.stderr is not None else math.nan)
            grid = request.p_grid or tuple(range(1, min(row.p_star, survival.horizon) + 1))
            curves.append(predict_rare_from_tau(survival, tau, request.t_r, grid, name=row.name))
    base = _baseline(request.baseline, survival)
    if base is not None:
        curves = [speedup(base[0], c, base[1]) for c in curves]

    rows: list[list[Any]] = []
    for curve in curves:
        for P, e, se, s, flag in zip(curve.P_values, curve.e_tp, curve.e_tp_stderr, curve.speedup, curve.flags()):
            rows.append([curve.name, P, None if e is DIVERGENT else e, None if e is DIVERGENT else se, s, flag])
    out = _prepare(request.out_dir)
    write_csv(out / PREDICTION_FILE, PREDICTION_HEADER, rows)
    with DecisionTraceEmitter(out, request.config_digest, "predict"):
        for curve in curves:
            parent = _prediction_event(curve)["decision_id"]
            _interval_event(curve, [parent])
    return curves


def run_validate(config: RunConfig, threads: int = 1) -> Path:
    """Brute-force E[T_P]: one every-P ensemble per candidate and P."""
    seed = config.require_seed()
    grid = config.analysis.p_grid
    if not grid:
        raise UsageError("validate needs --p-grid or analysis.p_grid")
    rows: list[list[Any]] = []
    for name, spec in _candidates(config):
        for P in grid:
            ensemble = simulate_ensemble(config.process, Protocol.every_p(P, spec), config.n_trajectories, seed, threads)
            sample = fpt_sample(ensemble)
            n_absorbed = len(sample.times)
            mean: float | None = None
            se: float | None = None
            if sample.n_censored:
                logger.warning("%s P=%d: %d censored; empirical mean left blank", name, P, sample.n_censored)
            else:
                mean = mean_fpt(sample)
                if n_absorbed > 1:
                    se = float(np.std(sample.times, ddof=1) / math.sqrt(n_absorbed))
            rows.append([name, P, mean, se, ensemble.n, n_absorbed, sample.n_censored])
    path = _prepare(config.output_dir) / VALIDATE_FILE
    write_csv(path, VALIDATE_HEADER, rows)
    return path


def run_oracle(model: ChainModel, grid: Sequence[int], out_dir: Path) -> Path:
    if model.reset_kernel is None:
        model = model.with_full_sr()
    P_values = sorted({int(P) for P in grid})
    if not P_values or P_values[0] < 1:
        raise UsageError("oracle needs a grid of positive P values")
    curve = exact_survival(model, P_values[-1])
    rows: list[list[Any]] = []
    for P in P_values:
        psi_P = float(curve.psi[P])
        flag = "ok"
        try:
            e_tp: float | None = exact_perturbed_mfpt(model, P)
        except NonAbsorbingError as exc:
            logger.info("P=%d: %s", P, exc)
            e_tp, flag = None, "divergent"
        try:
            tau: float | None = exact_residual(model, P)
        except EmptyConditionalError:
            tau = None
            if flag == "ok":
                flag = "absorbed"
        rows.append([P, e_tp, tau, psi_P, flag])
    path = _prepare(out_dir) / ORACLE_FILE
    write_csv(path, ORACLE_HEADER, rows)
    return path


__all__ = [
    "PredictRequest",
    "run_measure_tau",
    "run_oracle",
    "run_predict",
    "run_qss",
    "run_simulate",
    "run_stats",
    "run_survival",
    "run_tau_sweep",
    "run_validate",
]
