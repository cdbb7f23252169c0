"""Monte Carlo size/power studies, permutation audits and report files."""

import logging
import math
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import matplotlib
import numpy as np
import pandas as pd
from config import Config, config
from datamodel import (
    PERMUTE,
    DataError,
    Dataset,
    ErrorDistribution,
    Seed,
    generate_ar1_gaussian,
    sample_error,
)
from dotenv import dotenv_values
from inference import DegenerateStatisticError, InferenceEngine
from joblib import Parallel, delayed
from matplotlib.figure import Figure
from models import (
    RateRow,
    ReplicationRecord,
    StudyConfig,
    StudyReport,
    TuningOptions,
)
from pydantic import ValidationError
from solvers import SolverError
from threadpoolctl import threadpool_limits

logger = logging.getLogger(__name__)

# Failures a replication records instead of raising
REPLICATION_ERRORS = (
    SolverError,
    DegenerateStatisticError,
    np.linalg.LinAlgError,
    FloatingPointError,
)

PEARSON_METHODS = ("ppcov", "ppcov_rank")
REPORT_FORMATS = ("csv", "json", "svg")
STUDY_KEYS = (
    "study",
    "n",
    "p",
    "rho",
    "beta",
    "error",
    "methods",
    "reps",
    "alpha",
    "target",
    "grid",
    "vary",
    "case",
    "seed",
    "threads",
    "tau",
)


class StudyConfigError(ValueError):
    """Raised when a study configuration file is malformed"""


def group_case(case: int) -> Dict[str, List]:
    """Preset group-test designs (0-based indices).

    Case 1: S = {1, 2, 3} with beta_4..beta_10 = 1.
    Case 2: S = {1, ..., 10} with beta_4..beta_10 = 0.
    In both, the grid value is assigned to beta_1..beta_3.
    """
    if case == 1:
        return {"target": [0, 1, 2], "vary": [0, 1, 2], "beta": [0.0] * 3 + [1.0] * 7}
    if case == 2:
        return {"target": list(range(10)), "vary": [0, 1, 2], "beta": [0.0] * 10}
    raise StudyConfigError(f"Unknown group case {case} (expected 1 or 2)")


def _engine(cfg: Config, study: StudyConfig) -> InferenceEngine:
    return InferenceEngine(replace(cfg, QUANTILE_TAU=study.tau))


def _simulate(study: StudyConfig, beta: np.ndarray, seed: Seed) -> Dataset:
    """Y = X beta + eps; X and eps depend on (seed, rep) only, never on the grid"""
    X = generate_ar1_gaussian(study.n, study.p, study.rho, seed)
    eps = sample_error(study.error, study.n, seed)
    return Dataset(y=X @ beta + eps, X=X)


def _record(method: str, rep: int, grid_value: float, result) -> ReplicationRecord:
    return ReplicationRecord(
        method=method,
        rep=rep,
        grid_value=grid_value,
        statistic=result.statistic,
        p_value=result.p_value,
        reject=result.reject,
        converged=result.converged,
    )


def _replicate(
    cfg: Config, study: StudyConfig, beta: np.ndarray, grid_value: float, rep: int
) -> List[ReplicationRecord]:
    """Run every method of the study on one simulated data set"""
    with threadpool_limits(limits=1):
        seed = Seed(value=study.seed, stream=rep)
        data = _simulate(study, beta, seed)
        engine = _engine(cfg, study)

        if study.study == "group":
            fits = engine.prepare(data, study.target, seed)
            try:
                return [_record("pgcov", rep, grid_value, engine.evaluate_group(fits))]
            except REPLICATION_ERRORS as e:
                logger.warning("rep %d (grid %g) failed: %s", rep, grid_value, e)
                return [ReplicationRecord.failed("pgcov", rep, grid_value, repr(e))]

        fits = engine.prepare(data, study.target[0], seed)
        records = []
        for method in study.methods:
            try:
                result = engine.evaluate(fits, method, study.alpha)
            except REPLICATION_ERRORS as e:
                logger.warning(
                    "rep %d (grid %g) %s failed: %s", rep, grid_value, method, e
                )
                records.append(
                    ReplicationRecord.failed(method, rep, grid_value, repr(e))
                )
                continue
            records.append(_record(method, rep, grid_value, result))
        return records


def _aggregate(
    records: List[ReplicationRecord], study: StudyConfig, grid: Sequence[float]
) -> List[RateRow]:
    rows = []
    for g in grid:
        for method in study.methods:
            cell = [r for r in records if r.method == method and r.grid_value == g]
            rate = sum(r.reject for r in cell) / study.reps
            failures = sum(r.error is not None for r in cell)
            # Failed replications carry no decision
            effective = study.reps - failures
            rows.append(
                RateRow(
                    method=method,
                    grid_value=g,
                    rate=rate,
                    se=math.sqrt(rate * (1 - rate) / max(effective, 1)),
                    reps=study.reps,
                    reps_effective=effective,
                    failures=failures,
                    nonconverged=sum(
                        (not r.converged) and r.error is None for r in cell
                    ),
                )
            )
    return rows


def _run(
    study: StudyConfig, cfg: Config, grid: Sequence[float], betas: List[np.ndarray]
) -> StudyReport:
    available = _engine(cfg, study).registry.names()
    unknown = [m for m in study.methods if m not in available]
    if unknown:
        raise StudyConfigError(
            f"Unknown methods {unknown} (available: {', '.join(available)})"
        )
    start = time.perf_counter()
    logger.info(
        "%s study: n=%d p=%d error=%s reps=%d grid=%s",
        study.study,
        study.n,
        study.p,
        study.error,
        study.reps,
        list(grid),
    )
    batches = Parallel(n_jobs=study.parallelism)(
        delayed(_replicate)(cfg, study, beta, float(g), rep)
        for g, beta in zip(grid, betas)
        for rep in range(study.reps)
    )
    records = [record for batch in batches for record in batch]
    grid = [float(g) for g in grid]

    report = StudyReport(
        format_version=cfg.REPORT_FORMAT_VERSION,
        config=study,
        grid=grid,
        rows=_aggregate(records, study, grid),
        records=records,
    )
    flags = []
    if report.failure_rate > cfg.MAX_FAILURE_RATE:
        report.valid = False
        flags.append(
            f"failure rate {report.failure_rate:.3f} exceeds {cfg.MAX_FAILURE_RATE}"
        )
        logger.warning("study flagged invalid: %s", flags[-1])
    if ErrorDistribution(study.error).infinite_variance:
        for method in study.methods:
            if method in PEARSON_METHODS:
                flags.append(
                    f"{method}: finite-variance assumption violated under "
                    f"{study.error} errors"
                )
    report.flags = flags
    report.runtime_seconds = time.perf_counter() - start
    return report


def run_size_study(
    study: StudyConfig,
    signal_levels: Optional[Sequence[float]] = None,
    cfg: Config = config,
) -> StudyReport:
    """Empirical size of each method for H0: beta_target = 0.

    With signal levels, every nonzero coefficient of the design is set to each
    level in turn (one row per level); otherwise the design is used as given
    and the grid value records its largest coefficient.
    """
    base = study.beta_vector()
    if np.any(base[study.target] != 0):
        raise StudyConfigError("size study needs beta = 0 at the target")
    levels = list(signal_levels if signal_levels is not None else study.grid)
    if not levels:
        levels, betas = [float(np.abs(base).max())], [base]
    else:
        betas = []
        for level in levels:
            beta = base.copy()
            beta[base != 0] = level * np.sign(base[base != 0])
            betas.append(beta)
    return _run(study.model_copy(update={"study": "size"}), cfg, levels, betas)


def run_power_study(
    study: StudyConfig,
    signal_grid: Optional[Sequence[float]] = None,
    cfg: Config = config,
) -> StudyReport:
    """Rejection rates as the target coefficient runs over the signal grid"""
    grid = list(signal_grid if signal_grid is not None else study.grid) or [0.0]
    if any(g < 0 for g in grid):
        raise StudyConfigError("signal grid values must be non-negative")
    base = study.beta_vector()
    betas = []
    for g in grid:
        beta = base.copy()
        beta[study.target[0]] = g
        betas.append(beta)
    return _run(study.model_copy(update={"study": "power"}), cfg, grid, betas)


def run_group_study(
    study: StudyConfig,
    S: Optional[Sequence[int]] = None,
    beta_grid: Optional[Sequence[float]] = None,
    vary: Optional[Sequence[int]] = None,
    cfg: Config = config,
) -> StudyReport:
    """Chi-square group test of H0: beta_S = 0 over a grid of signal levels"""
    S = list(S if S is not None else study.target)
    vary = list(vary if vary is not None else (study.vary or S))
    grid = list(beta_grid if beta_grid is not None else study.grid) or [0.0]
    if len(S) >= study.n:
        raise StudyConfigError(f"group of size {len(S)} needs n > {len(S)}")
    base = study.beta_vector()
    betas = []
    for g in grid:
        beta = base.copy()
        beta[vary] = g
        betas.append(beta)
    study = study.model_copy(
        update={"study": "group", "methods": ["pgcov"], "target": S, "vary": vary}
    )
    return _run(study, cfg, grid, betas)


def run_study(study: StudyConfig, cfg: Config = config) -> StudyReport:
    runners = {"size": run_size_study, "power": run_power_study}
    if study.study == "group":
        return run_group_study(study, cfg=cfg)
    return runners[study.study](study, cfg=cfg)


def augment_with_permutations(
    data: Dataset,
    m: int,
    seed: Seed,
    permute: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None,
) -> Dataset:
    """Append m row-permuted copies of the predictor block; Y is untouched.

    permute(rng, n) returns the row order of one copy; a random permutation by
    default.
    """
    if m < 1:
        raise DataError(f"number of permuted copies must be at least 1, got {m}")
    rng = seed.generator(PERMUTE)
    permute = permute or (lambda g, n: g.permutation(n))
    blocks = [data.X]
    names = list(data.names)
    for j in range(1, m + 1):
        blocks.append(data.X[np.asarray(permute(rng, data.n))])
        names.extend(f"{name}_perm{j}" for name in data.names)
    return Dataset(
        y=data.y.copy(), X=np.hstack(blocks), names=names, response=data.response
    )


def _column_results(
    cfg: Config,
    data: Dataset,
    k: int,
    methods: Sequence[str],
    alpha: float,
    seed: Seed,
    tuning: Optional[TuningOptions],
) -> List[Dict]:
    with threadpool_limits(limits=1):
        engine = InferenceEngine(cfg)
        fits = engine.prepare(data, k, seed, tuning)
        rows = []
        for method in methods:
            row = {"column": data.names[k], "method": method}
            try:
                result = engine.evaluate(fits, method, alpha)
            except REPLICATION_ERRORS as e:
                logger.warning("column %s, %s failed: %s", data.names[k], method, e)
                row.update(
                    estimate=np.nan,
                    statistic=np.nan,
                    p_value=np.nan,
                    reject=False,
                    error=repr(e),
                )
            else:
                row.update(
                    estimate=float(result.pcov.value),
                    statistic=result.statistic,
                    p_value=result.p_value,
                    reject=result.reject,
                    error=None,
                )
            rows.append(row)
        return rows


def _scan(
    data: Dataset,
    columns: Sequence[int],
    methods: Sequence[str],
    alpha: float,
    cfg: Config,
    seed: Seed,
    tuning: Optional[TuningOptions],
    parallelism: int,
) -> List[Dict]:
    batches = Parallel(n_jobs=parallelism)(
        delayed(_column_results)(cfg, data, k, methods, alpha, seed, tuning)
        for k in columns
    )
    return [row for batch in batches for row in batch]


def scan_columns(
    data: Dataset,
    methods: Sequence[str] = ("pgcov",),
    alpha: Optional[float] = None,
    cfg: Config = config,
    seed: Optional[Seed] = None,
    tuning: Optional[TuningOptions] = None,
    columns: Optional[Sequence[int]] = None,
    parallelism: int = 1,
) -> pd.DataFrame:
    """Test every predictor column (or the given ones) with each method"""
    alpha = cfg.ALPHA if alpha is None else alpha
    columns = list(range(data.p)) if columns is None else list(columns)
    rows = _scan(
        data, columns, methods, alpha, cfg, seed or Seed(value=0), tuning, parallelism
    )
    return pd.DataFrame(
        rows,
        columns=[
            "column",
            "method",
            "estimate",
            "statistic",
            "p_value",
            "reject",
            "error",
        ],
    )


def rejection_audit(
    data: Dataset,
    augmented_cols: Sequence[int],
    methods: Sequence[str],
    alphas: Sequence[float] = (0.01, 0.05, 0.1),
    cfg: Config = config,
    seed: Optional[Seed] = None,
    tuning: Optional[TuningOptions] = None,
    parallelism: int = 1,
) -> pd.DataFrame:
    """Rejection proportion over known-null columns, per method and level"""
    columns = ["method", "alpha", "rejections", "columns", "proportion", "failures"]
    if not methods or not augmented_cols:
        return pd.DataFrame(columns=columns)

    results = pd.DataFrame(
        _scan(
            data,
            list(augmented_cols),
            methods,
            max(alphas),
            cfg,
            seed or Seed(value=0),
            tuning,
            parallelism,
        )
    )
    rows = []
    for method in methods:
        p_values = results.loc[results["method"] == method, "p_value"].to_numpy()
        failed = int(np.isnan(p_values).sum())
        for alpha in alphas:
            rejections = int(np.sum(p_values < alpha))
            rows.append(
                {
                    "method": method,
                    "alpha": alpha,
                    "rejections": rejections,
                    "columns": len(p_values),
                    "proportion": rejections / len(p_values),
                    "failures": failed,
                }
            )
    return pd.DataFrame(rows, columns=columns)


def _rates_frame(report: StudyReport) -> pd.DataFrame:
    return pd.DataFrame(
        [row.model_dump() for row in report.rows],
        columns=list(RateRow.model_fields),
    )


def _plot(report: StudyReport, path: Path):
    frame = _rates_frame(report)
    with matplotlib.rc_context({"svg.hashsalt": "pgcov", "svg.fonttype": "path"}):
        fig = Figure(figsize=(6, 4))
        ax = fig.subplots()
        for method in report.config.methods:
            rows = frame[frame["method"] == method].sort_values("grid_value")
            ax.errorbar(
                rows["grid_value"],
                rows["rate"],
                yerr=rows["se"],
                marker="o",
                capsize=3,
                label=method,
            )
        ax.axhline(report.config.alpha, color="grey", linestyle="--", linewidth=0.8)
        ax.set_xlabel("signal level")
        ax.set_ylabel("rejection rate")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(
            f"{report.config.study} study: n={report.config.n}, "
            f"p={report.config.p}, {report.config.error} errors"
        )
        ax.legend()
        fig.savefig(path, format="svg", metadata={"Date": None})


def emit_report(report: StudyReport, fmt: str, path: Union[str, Path]) -> Path:
    """Write the report as csv (rates), json (everything) or svg (curves)"""
    path = Path(path)
    if fmt == "csv":
        _rates_frame(report).to_csv(path, index=False)
    elif fmt == "json":
        path.write_text(report.model_dump_json(indent=2))
    elif fmt == "svg":
        _plot(report, path)
    else:
        raise ValueError(f"Unknown report format '{fmt}' (expected csv, json or svg)")
    return path


def write_reports(
    report: StudyReport, output_dir: Union[str, Path], stem: Optional[str] = None
) -> List[Path]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{report.config.study}_{report.config.error}"
    return [
        emit_report(report, fmt, output_dir / f"{stem}.{fmt}") for fmt in REPORT_FORMATS
    ]


def _floats(text: str) -> List[float]:
    values = []
    for token in filter(None, (t.strip() for t in text.split(","))):
        if "*" in token:
            value, count = token.split("*", 1)
            values.extend([float(value)] * int(count))
        else:
            values.append(float(token))
    return values


def _indices(text: str) -> List[int]:
    """1-based comma list to 0-based indices"""
    return [int(t) - 1 for t in text.split(",") if t.strip()]


_STUDY_DEFAULTS = {
    "size": {"beta": [1.0] * 10, "target": [10]},
    "power": {"beta": [0.0] + [1.0] * 9, "target": [0]},
    "group": group_case(1),
}


def read_study_file(path: Union[str, Path]) -> Dict[str, str]:
    """Raw key=value pairs of a study file, keys lower-cased"""
    path = Path(path)
    if not path.is_file():
        raise StudyConfigError(f"Study config {path} not found")
    raw = {k.strip().lower(): (v or "").strip() for k, v in dotenv_values(path).items()}
    unknown = sorted(set(raw) - set(STUDY_KEYS))
    if unknown:
        raise StudyConfigError(f"Unknown keys in {path}: {', '.join(unknown)}")
    return raw


def load_study_config(
    path: Union[str, Path],
    cfg: Config = config,
    study: Optional[str] = None,
    overrides: Optional[Dict] = None,
) -> StudyConfig:
    """Parse a key=value study file.

    Keys: study, n, p, rho, beta, error, methods, reps, alpha, target, grid,
    vary, case, seed, threads, tau. Indices are 1-based; beta accepts
    'value*count' tokens, e.g. beta = 1*10. Missing keys fall back to cfg and
    to the defaults of the study kind; overrides (0-based, typed) win over
    the file.
    """
    raw = read_study_file(path)
    kind = raw.get("study", study or "size")
    if kind not in _STUDY_DEFAULTS:
        raise StudyConfigError(f"Unknown study '{kind}' (expected size, power, group)")
    if study is not None and kind != study:
        raise StudyConfigError(f"{path} describes a {kind} study, not a {study} study")
    try:
        values = dict(_STUDY_DEFAULTS[kind])
        if "case" in raw:
            values.update(group_case(int(raw["case"])))
        values.update(
            study=kind,
            n=int(raw.get("n", cfg.STUDY_N)),
            p=int(raw.get("p", cfg.STUDY_P)),
            rho=float(raw.get("rho", cfg.AR_RHO)),
            reps=int(raw.get("reps", cfg.STUDY_REPS)),
            alpha=float(raw.get("alpha", cfg.ALPHA)),
            tau=float(raw.get("tau", cfg.QUANTILE_TAU)),
            seed=int(raw.get("seed", 0)),
            parallelism=int(raw.get("threads", cfg.threads())),
        )
        if "error" in raw:
            values["error"] = ErrorDistribution(raw["error"]).name
        if "methods" in raw:
            values["methods"] = [
                m.strip() for m in raw["methods"].split(",") if m.strip()
            ]
        if "beta" in raw:
            values["beta"] = _floats(raw["beta"])
        if "grid" in raw:
            values["grid"] = _floats(raw["grid"])
        if "target" in raw:
            values["target"] = _indices(raw["target"])
        if "vary" in raw:
            values["vary"] = _indices(raw["vary"])
        values.update(overrides or {})
        return StudyConfig(**values)
    except (ValueError, ValidationError) as e:
        raise StudyConfigError(f"Invalid study config {path}: {e}") from e
