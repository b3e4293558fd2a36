from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable

from .config import (
    AnalysisConfig,
    RunConfig,
    load_config,
    parse_grid,
    parse_quantiles,
    parse_window,
    resolve_threads,
    with_overrides,
)
from .errors import FptPerturbError, UsageError
from .oracle import chain_from_process, load_chain
from .pipeline import (
    PredictRequest,
    run_measure_tau,
    run_oracle,
    run_predict,
    run_qss,
    run_simulate,
    run_stats,
    run_survival,
    run_tau_sweep,
    run_validate,
)
from .verify import verify_outputs

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _config(args: argparse.Namespace) -> RunConfig:
    if args.config is None:
        raise UsageError(f"{args.command} needs --config")
    return with_overrides(
        load_config(args.config),
        seed=getattr(args, "seed", None),
        seed_from_entropy=getattr(args, "seed_from_entropy", False),
        out=args.out,
        p_star=getattr(args, "p_star", None),
        p_grid=getattr(args, "p_grid", None),
        alpha=getattr(args, "alpha", None),
        window=getattr(args, "window", None),
        quantiles=getattr(args, "quantiles", None),
    )


def _analysis(args: argparse.Namespace) -> AnalysisConfig:
    return _config(args).analysis if args.config is not None else AnalysisConfig()


def _run_dir(args: argparse.Namespace) -> Path:
    if args.run is not None:
        return args.run
    if args.out is not None:
        return args.out
    if args.config is not None:
        return load_config(args.config).output_dir
    return Path("out")


def cmd_simulate(args: argparse.Namespace) -> int:
    manifest = run_simulate(_config(args), resolve_threads(args.threads))
    logger.info("wrote %d trajectories (%d absorbed)", manifest.n_trajectories, manifest.n_absorbed)
    return 0


def cmd_survival(args: argparse.Namespace) -> int:
    run_dir = _run_dir(args)
    run_survival(run_dir, args.out or run_dir)
    return 0


def cmd_qss(args: argparse.Namespace) -> int:
    analysis = _analysis(args)
    run_dir = _run_dir(args)
    report = run_qss(
        run_dir,
        args.out or run_dir,
        window=args.window or analysis.window,
        alpha=args.alpha if args.alpha is not None else analysis.alpha,
        min_survivors=analysis.min_survivors,
    )
    print(f"t_r={report.t_r if report.t_r is not None else 'none'}")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    analysis = _analysis(args)
    run_dir = _run_dir(args)
    run_stats(run_dir, args.quantiles or analysis.quantiles, args.out or run_dir)
    return 0


def cmd_measure_tau(args: argparse.Namespace) -> int:
    rows = run_measure_tau(_config(args), resolve_threads(args.threads))
    for row in rows:
        logger.info("%s: tau_bar=%s over %d residuals", row.name, row.tau_bar, row.n)
    return 0


def cmd_tau_sweep(args: argparse.Namespace) -> int:
    run_tau_sweep(_config(args), resolve_threads(args.threads))
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    analysis = _analysis(args)
    out = args.out or (load_config(args.config).output_dir if args.config else Path("out"))
    request = PredictRequest(
        survival_path=args.survival or out / "survival.csv",
        out_dir=out,
        tau_path=args.tau,
        sr=args.sr,
        p_grid=args.p_grid or analysis.p_grid,
        t_r=args.t_r if args.t_r is not None else analysis.t_r,
        baseline=args.baseline if args.baseline is not None else analysis.baseline,
        config_digest=_config(args).digest() if args.config else "",
    )
    run_predict(request)
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    run_validate(_config(args), resolve_threads(args.threads))
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    if args.chain is not None:
        model = load_chain(args.chain)
        grid = args.p_grid or (_analysis(args).p_grid if args.config else None)
        out = args.out or Path("out")
    else:
        config = _config(args)
        model = chain_from_process(config.process)
        grid = config.analysis.p_grid
        out = config.output_dir
    if not grid:
        raise UsageError("oracle needs --p-grid or analysis.p_grid")
    run_oracle(model, grid, out)
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    verify_outputs(args.out or Path("out"))
    print("Verification passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fpt-perturb",
        description="Predict mean first-passage times of stochastic training under periodic perturbation",
    )
    noise = parser.add_mutually_exclusive_group()
    noise.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    noise.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Run config (YAML)")
    common.add_argument("--out", type=Path, help="Output directory (default: config output_dir)")

    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, help="Master seed (unsigned 64-bit)")
    seeded.add_argument("--seed-from-entropy", action="store_true", help="Draw and record a fresh master seed")
    seeded.add_argument("--threads", type=int, help="Worker threads (fallback: FPT_PERTURB_THREADS)")

    run_input = argparse.ArgumentParser(add_help=False)
    run_input.add_argument("--run", type=Path, help="Directory holding manifest.json and trajectories.jsonl")

    sub.add_parser("simulate", parents=[common, seeded], help="Simulate a trajectory ensemble")
    sub.add_parser("survival", parents=[common, run_input], help="Survival curve of an ensemble")

    qss = sub.add_parser("qss", parents=[common, run_input], help="Relaxation to the quasi-steady state")
    qss.add_argument("--window", type=parse_window, help="Reference window t1:t2")
    qss.add_argument("--alpha", type=float, help="KS significance level (default 0.05)")

    stats = sub.add_parser("stats", parents=[common, run_input], help="Per-epoch statistics over survivors")
    stats.add_argument("--quantiles", type=parse_quantiles, help="Comma list, e.g. 0.1,0.9")

    tau = sub.add_parser("measure-tau", parents=[common, seeded], help="Residual times after one perturbation")
    tau.add_argument("--p-star", type=int, help="Perturbation epoch")
    tau.add_argument("--quantiles", type=parse_quantiles, help="Quantiles for residual_stats.csv")

    sweep = sub.add_parser("tau-sweep", parents=[common, seeded], help="Residual times across perturbation epochs")
    sweep.add_argument("--p-grid", type=parse_grid, help="a:b:step or comma list")

    predict = sub.add_parser("predict", parents=[common], help="Predicted E[T_P] over a P grid")
    predict.add_argument("--survival", type=Path, help="survival.csv (default: <out>/survival.csv)")
    predict.add_argument("--tau", type=Path, help="tau.csv from measure-tau")
    predict.add_argument("--sr", action="store_true", help="Full resetting, from the survival curve alone")
    predict.add_argument("--p-grid", type=parse_grid, help="a:b:step or comma list")
    predict.add_argument("--t-r", type=int, help="Relaxation time from qss")
    predict.add_argument("--baseline", type=float, help="Unperturbed E[T] for the speedup column")

    validate = sub.add_parser("validate", parents=[common, seeded], help="Brute-force every-P simulation")
    validate.add_argument("--p-grid", type=parse_grid, help="a:b:step or comma list")

    oracle = sub.add_parser("oracle", parents=[common], help="Exact quantities for a finite chain")
    oracle.add_argument("--chain", type=Path, help="chain.json with Q, p0 and optional reset_kernel")
    oracle.add_argument("--p-grid", type=parse_grid, help="a:b:step or comma list")

    sub.add_parser("verify", parents=[common], help="Verify a run directory")
    return parser


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "simulate": cmd_simulate,
    "survival": cmd_survival,
    "qss": cmd_qss,
    "stats": cmd_stats,
    "measure-tau": cmd_measure_tau,
    "tau-sweep": cmd_tau_sweep,
    "predict": cmd_predict,
    "validate": cmd_validate,
    "oracle": cmd_oracle,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return COMMANDS[args.command](args)
    except FptPerturbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except AssertionError as exc:
        print(f"error: verification failed: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
