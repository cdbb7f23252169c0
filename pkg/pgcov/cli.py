"""Command-line front end for partial covariance tests and studies.

Exit codes: 0 ok, 2 input or configuration error, 3 solver failure or
non-convergence, 4 study flagged invalid.
"""

import argparse
import json
import logging
import secrets
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from config import Config, config
from datamodel import DataError, Dataset, ErrorDistribution, Seed, load_csv, save_csv
from inference import (
    DegenerateStatisticError,
    InferenceEngine,
    InfiniteVarianceError,
    are_gini_vs_pearson,
)
from models import StudyReport, TestResult, TuningOptions
from pydantic import ValidationError
from simharness import (
    StudyConfigError,
    augment_with_permutations,
    group_case,
    load_study_config,
    read_study_file,
    rejection_audit,
    run_group_study,
    run_power_study,
    run_size_study,
    scan_columns,
    write_reports,
)
from solvers import SolverError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_INVALID_STUDY = 4

# Friendly spellings accepted by --method
METHOD_ALIASES = {
    "gini": "pgcov",
    "pearson": "ppcov",
    "pearson-rank": "ppcov_rank",
    "quantile": "pqcov",
}


def _method(name: str) -> str:
    return METHOD_ALIASES.get(name, name)


def _lambda_x(value: str):
    return value if value in ("default", "cv") else float(value)


def _floats(text: str) -> List[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _resolve_seed(seed: Optional[int]) -> int:
    """Use the given seed or draw one and report it for reproduction"""
    if seed is None:
        seed = secrets.randbits(64)
        print(f"seed: {seed}", file=sys.stderr)
    return seed


def _tuning(args) -> TuningOptions:
    return TuningOptions(
        lambda_theta=args.lambda_theta,
        lambda_x=args.lambda_x,
        lambda_y=args.lambda_y,
        lambda_q=args.lambda_q,
        pivotal_c=args.pivotal_c,
        pivotal_alpha0=args.pivotal_alpha0,
        pivotal_draws=args.pivotal_draws,
    )


def _add_data_args(parser: argparse.ArgumentParser):
    parser.add_argument("--csv", required=True, type=Path, help="input CSV with header")
    parser.add_argument("--response", required=True, help="response column name")
    parser.add_argument("--seed", type=int, help="random seed (generated if absent)")
    parser.add_argument("--json", action="store_true", help="machine-readable output")


def _add_tuning_args(parser: argparse.ArgumentParser, cfg: Config):
    group = parser.add_argument_group("tuning")
    group.add_argument(
        "--lambda-theta",
        type=float,
        help="rank-Lasso penalty; pivotal rule when omitted",
    )
    group.add_argument(
        "--lambda-x",
        type=_lambda_x,
        default="default",
        help="node-wise Lasso penalty: a number, 'default' "
        f"({cfg.LASSO_LAMBDA_SCALE} sd(x) sqrt(2 log p / n)) or 'cv'",
    )
    group.add_argument("--lambda-y", type=float, help="least-squares Lasso penalty")
    group.add_argument("--lambda-q", type=float, help="quantile Lasso penalty")
    group.add_argument(
        "--pivotal-c", type=float, default=cfg.PIVOTAL_C, help="pivotal constant c"
    )
    group.add_argument(
        "--pivotal-alpha0",
        type=float,
        default=cfg.PIVOTAL_ALPHA0,
        help="pivotal quantile level alpha0",
    )
    group.add_argument(
        "--pivotal-draws",
        type=int,
        default=cfg.PIVOTAL_DRAWS,
        help="pivotal simulation draws B",
    )
    group.add_argument(
        "--tau", type=float, default=cfg.QUANTILE_TAU, help="quantile level for pqcov"
    )


def _add_study_args(parser: argparse.ArgumentParser, cfg: Config):
    parser.add_argument("config", type=Path, help="key=value study file")
    parser.add_argument(
        "--output-dir", type=Path, default=Path(cfg.OUTPUT_DIR), help="report folder"
    )
    parser.add_argument("--stem", help="report file name stem")
    parser.add_argument(
        "--profile",
        choices=["desk", "paper"],
        help="study scale; sets n and p over the file's values",
    )
    parser.add_argument("--seed", type=int, help="overrides the file's seed")
    parser.add_argument("--reps", type=int, help="overrides the file's reps")
    parser.add_argument(
        "--threads", type=int, help="parallel workers; all logical cores when omitted"
    )
    parser.add_argument("--json", action="store_true", help="print the full report")


def build_parser(cfg: Config = config) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgcov",
        description="Partial Gini covariance tests for high-dimensional linear models",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        epilog=f"solver tolerances: ADMM tol={cfg.ADMM_TOL}, "
        f"max_iter={cfg.ADMM_MAX_ITER}; Lasso tol={cfg.LASSO_TOL}, "
        f"max_iter={cfg.LASSO_MAX_ITER}",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v info, -vv debug"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    formatter = argparse.ArgumentDefaultsHelpFormatter

    test = sub.add_parser("test", help="test H0: beta_k = 0", formatter_class=formatter)
    _add_data_args(test)
    test.add_argument("--target", required=True, help="column name or 1-based index")
    test.add_argument(
        "--method",
        action="append",
        type=_method,
        help="pgcov, ppcov, ppcov_rank, pqcov (or gini, pearson, pearson-rank, "
        "quantile); repeat to compare, pgcov when omitted",
    )
    test.add_argument("--alpha", type=float, default=cfg.ALPHA, help="test level")
    _add_tuning_args(test, cfg)

    group_test = sub.add_parser(
        "group-test",
        help="chi-square test of H0: beta_S = 0",
        formatter_class=formatter,
    )
    _add_data_args(group_test)
    group_test.add_argument(
        "--targets", required=True, help="comma list of column names or 1-based indices"
    )
    group_test.add_argument("--alpha", type=float, default=cfg.ALPHA, help="test level")
    _add_tuning_args(group_test, cfg)

    for kind in ("size", "power", "group"):
        study = sub.add_parser(
            f"simulate-{kind}",
            help=f"Monte Carlo {kind} study",
            formatter_class=formatter,
        )
        _add_study_args(study, cfg)
        study.add_argument("--grid", type=_floats, help="comma list of signal levels")
        if kind == "group":
            study.add_argument("--case", type=int, choices=[1, 2], help="preset design")

    are = sub.add_parser(
        "are", help="efficiency of the Gini test vs Pearson", formatter_class=formatter
    )
    are.add_argument(
        "distribution",
        nargs="?",
        default="all",
        help=f"one of {', '.join(ErrorDistribution.names())}, or 'all'",
    )
    are.add_argument("--json", action="store_true", help="machine-readable output")

    augment = sub.add_parser(
        "augment",
        help="append row-permuted copies of the predictors",
        formatter_class=formatter,
    )
    _add_data_args(augment)
    augment.add_argument("--copies", type=int, default=3, help="permuted copies m")
    augment.add_argument("--output", required=True, type=Path, help="output CSV")

    audit = sub.add_parser(
        "audit",
        help="rejection proportions over permuted (null) columns",
        formatter_class=formatter,
    )
    _add_data_args(audit)
    audit.add_argument("--copies", type=int, default=3, help="permuted copies m")
    audit.add_argument(
        "--methods",
        type=lambda s: [_method(m.strip()) for m in s.split(",") if m.strip()],
        default=["pgcov", "pqcov", "ppcov", "ppcov_rank"],
        help="comma list of methods",
    )
    audit.add_argument(
        "--alphas", type=_floats, default=[0.01, 0.05, 0.1], help="comma list of levels"
    )
    audit.add_argument("--threads", type=int, help="parallel workers")
    _add_tuning_args(audit, cfg)

    scan = sub.add_parser(
        "scan", help="test every predictor column", formatter_class=formatter
    )
    _add_data_args(scan)
    scan.add_argument(
        "--methods",
        type=lambda s: [_method(m.strip()) for m in s.split(",") if m.strip()],
        default=["pgcov"],
        help="comma list of methods",
    )
    scan.add_argument("--alpha", type=float, default=cfg.ALPHA, help="test level")
    scan.add_argument("--threads", type=int, help="parallel workers")
    _add_tuning_args(scan, cfg)

    return parser


def _print_result(result: TestResult):
    decision = "reject" if result.reject else "do not reject"
    if result.df:
        reference = f"chi-square, df={result.df}"
    else:
        reference = "standard normal"
    lambdas = ", ".join(f"{k}={v:.4g}" for k, v in result.lambdas.items())
    print(f"method:     {result.method}")
    print(f"targets:    {', '.join(result.targets)}")
    print(f"statistic:  {result.statistic:.4f} ({reference})")
    print(f"p-value:    {result.p_value:.4g}")
    print(f"decision:   {decision} H0 at alpha={result.alpha}")
    print(f"lambdas:    {lambdas}")


def _report_results(results: List[TestResult], as_json: bool) -> int:
    if as_json:
        payload = [r.model_dump(mode="json") for r in results]
        print(json.dumps(payload[0] if len(payload) == 1 else payload, indent=2))
    else:
        for i, result in enumerate(results):
            if i:
                print()
            _print_result(result)
    for result in results:
        for note in result.notes:
            print(f"warning: {result.method}: {note}", file=sys.stderr)
    return EXIT_OK if all(r.converged for r in results) else EXIT_SOLVER


def _engine(cfg: Config, args) -> InferenceEngine:
    return InferenceEngine(replace(cfg, QUANTILE_TAU=args.tau))


def cmd_test(args, cfg: Config) -> int:
    data = load_csv(args.csv, args.response)
    k = data.index_of(args.target)
    seed = Seed(value=_resolve_seed(args.seed))
    methods = args.method or ["pgcov"]
    results = _engine(cfg, args).test_methods(
        data, k, methods, args.alpha, seed, _tuning(args)
    )
    return _report_results(results, args.json)


def cmd_group_test(args, cfg: Config) -> int:
    data = load_csv(args.csv, args.response)
    S = [data.index_of(t.strip()) for t in args.targets.split(",") if t.strip()]
    seed = Seed(value=_resolve_seed(args.seed))
    result = _engine(cfg, args).group_test(data, S, args.alpha, seed, _tuning(args))
    return _report_results([result], args.json)


def cmd_are(args, cfg: Config) -> int:
    if args.distribution == "all":
        names = ErrorDistribution.names()
    else:
        names = [args.distribution]
    results, failures = [], []
    for name in names:
        try:
            results.append(are_gini_vs_pearson(name))
        except InfiniteVarianceError as e:
            if args.distribution != "all":
                raise
            failures.append(str(e))

    if args.json:
        payload = [r.model_dump(mode="json") for r in results]
        print(json.dumps(payload[0] if len(payload) == 1 else payload, indent=2))
    else:
        for r in results:
            print(
                f"{r.distribution:<10} ARE={r.are:.3f}  var={r.var_used:.4g}  "
                f"f0={r.f0_used:.4g}"
            )
    for message in failures:
        print(f"warning: {message}", file=sys.stderr)
    return EXIT_OK


def _study_seed(args) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    if "seed" in read_study_file(args.config):
        return None
    return secrets.randbits(64)


def cmd_simulate(args, cfg: Config) -> int:
    kind = args.command.removeprefix("simulate-")
    overrides = {}
    if args.profile is not None:
        cfg = cfg.profile(args.profile)
        overrides.update(n=cfg.STUDY_N, p=cfg.STUDY_P)
        raw = read_study_file(args.config)
        replaced = [k for k in ("n", "p") if k in raw and int(raw[k]) != overrides[k]]
        if replaced:
            logger.warning(
                "profile %s overrides %s from %s",
                args.profile,
                ", ".join(f"{k}={raw[k]}" for k in replaced),
                args.config,
            )
    seed = _study_seed(args)
    if seed is not None:
        overrides["seed"] = seed
    if args.reps is not None:
        overrides["reps"] = args.reps
    if args.threads is not None:
        overrides["parallelism"] = args.threads
    if args.grid is not None:
        overrides["grid"] = args.grid
    if kind == "group" and args.case is not None:
        overrides.update(group_case(args.case))
    study = load_study_config(args.config, cfg, study=kind, overrides=overrides)
    print(f"seed: {study.seed}", file=sys.stderr)

    runners = {
        "size": run_size_study,
        "power": run_power_study,
        "group": run_group_study,
    }
    report: StudyReport = runners[kind](study, cfg=cfg)
    paths = write_reports(report, args.output_dir, args.stem)

    if args.json:
        print(report.model_dump_json(indent=2))
    else:
        for row in report.rows:
            print(
                f"{row.method:<11} grid={row.grid_value:<6g} rate={row.rate:.3f} "
                f"(se {row.se:.3f}, failures {row.failures})"
            )
        for path in paths:
            print(f"wrote {path}")
    for flag in report.flags:
        print(f"warning: {flag}", file=sys.stderr)
    return EXIT_OK if report.valid else EXIT_INVALID_STUDY


def cmd_augment(args, cfg: Config) -> int:
    data = load_csv(args.csv, args.response)
    seed = Seed(value=_resolve_seed(args.seed))
    augmented = augment_with_permutations(data, args.copies, seed)
    save_csv(augmented, args.output)
    if args.json:
        summary = {"path": str(args.output), "n": augmented.n, "p": augmented.p}
        print(json.dumps(summary))
    else:
        print(f"wrote {args.output}: n={augmented.n}, p={augmented.p}")
    return EXIT_OK


def _augmented(data: Dataset, copies: int, seed: Seed):
    augmented = augment_with_permutations(data, copies, seed)
    return augmented, list(range(data.p, augmented.p))


def cmd_audit(args, cfg: Config) -> int:
    data = load_csv(args.csv, args.response)
    seed = Seed(value=_resolve_seed(args.seed))
    augmented, columns = _augmented(data, args.copies, seed)
    table = rejection_audit(
        augmented,
        columns,
        args.methods,
        args.alphas,
        cfg=replace(cfg, QUANTILE_TAU=args.tau),
        seed=seed,
        tuning=_tuning(args),
        parallelism=args.threads or cfg.threads(),
    )
    print(table.to_json(orient="records", indent=2) if args.json else table.to_string())
    return EXIT_OK


def cmd_scan(args, cfg: Config) -> int:
    data = load_csv(args.csv, args.response)
    seed = Seed(value=_resolve_seed(args.seed))
    table = scan_columns(
        data,
        args.methods,
        args.alpha,
        cfg=replace(cfg, QUANTILE_TAU=args.tau),
        seed=seed,
        tuning=_tuning(args),
        parallelism=args.threads or cfg.threads(),
    )
    print(table.to_json(orient="records", indent=2) if args.json else table.to_string())
    return EXIT_OK


COMMANDS = {
    "test": cmd_test,
    "group-test": cmd_group_test,
    "simulate-size": cmd_simulate,
    "simulate-power": cmd_simulate,
    "simulate-group": cmd_simulate,
    "are": cmd_are,
    "augment": cmd_augment,
    "audit": cmd_audit,
    "scan": cmd_scan,
}


def _configure_logging(verbosity: int, cfg: Config):
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = getattr(logging, cfg.LOG_LEVEL.upper(), logging.WARNING)
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def main(argv: Optional[List[str]] = None, cfg: Config = config) -> int:
    args = build_parser(cfg).parse_args(argv)
    _configure_logging(args.verbose, cfg)

    # LinAlgError subclasses ValueError, so solver failures are matched first
    try:
        return COMMANDS[args.command](args, cfg)
    except (
        SolverError,
        DegenerateStatisticError,
        np.linalg.LinAlgError,
        FloatingPointError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except (DataError, StudyConfigError, ValidationError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
