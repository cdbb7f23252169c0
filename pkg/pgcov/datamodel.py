"""Numeric data types, reproducible random generation and rank utilities."""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import integrate, stats

logger = logging.getLogger(__name__)

# Purpose keys that split one (seed, stream) pair into independent substreams
DESIGN = 0
ERROR = 1
PIVOTAL = 2
PERMUTE = 3
CV = 4


class DataError(ValueError):
    """Raised when input data violates the dataset invariants"""


class Seed(BaseModel):
    """Root seed plus replication stream.

    Generators are numpy's default PCG64 bit generator seeded through
    SeedSequence(value, spawn_key=(stream, purpose)), so distinct streams and
    purposes give independent states and identical keys reproduce draws bit for
    bit on any platform numpy supports.
    """

    model_config = ConfigDict(frozen=True)

    value: int = Field(ge=0, lt=2**64)
    stream: int = Field(0, ge=0)

    def generator(self, *purpose: int) -> np.random.Generator:
        sequence = np.random.SeedSequence(self.value, spawn_key=(self.stream, *purpose))
        return np.random.default_rng(sequence)

    def for_stream(self, stream: int) -> "Seed":
        return Seed(value=self.value, stream=stream)


# name -> (label, frozen scipy law, infinite variance)
_LAWS: Dict[str, Tuple[str, Callable[[], "stats.rv_continuous"], bool]] = {
    "normal": ("Normal(0,1)", lambda: stats.norm(), False),
    "uniform": ("Uniform[0,1]", lambda: stats.uniform(0, 1), False),
    "t2": ("T2", lambda: stats.t(2), True),
    "t3": ("T3", lambda: stats.t(3), False),
    "cauchy": ("Cauchy(0,1)", lambda: stats.cauchy(), True),
    "exp": ("Exp(1)", lambda: stats.expon(), False),
    "lognormal": ("LogNormal(0,1)", lambda: stats.lognorm(s=1.0), False),
}


class ErrorDistribution:
    """A named error law with sampler, variance and difference density at zero"""

    def __init__(self, name: str):
        key = name.strip().lower()
        if key not in _LAWS:
            raise DataError(
                f"Unsupported error distribution '{name}' "
                f"(expected one of {', '.join(_LAWS)})"
            )
        self.name = key
        self.label, factory, self.infinite_variance = _LAWS[key]
        self.law = factory()

    @classmethod
    def names(cls) -> List[str]:
        return list(_LAWS)

    @classmethod
    def of(cls, dist: Union[str, "ErrorDistribution"]) -> "ErrorDistribution":
        return dist if isinstance(dist, ErrorDistribution) else cls(dist)

    def __repr__(self) -> str:
        return f"ErrorDistribution({self.name!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, ErrorDistribution) and other.name == self.name

    def __hash__(self) -> int:
        return hash(self.name)

    @cached_property
    def variance(self) -> float:
        if self.infinite_variance:
            return float("inf")
        return float(self.law.var())

    @cached_property
    def f0(self) -> float:
        """Density of eps1 - eps2 at zero, i.e. the integral of f squared"""
        if self.name == "lognormal":
            # x = exp(u): f(x)^2 dx = phi(u)^2 exp(-u) du, folded to avoid inf * 0
            value, _ = integrate.quad(
                lambda u: np.exp(-u * u - u) / (2 * np.pi),
                -np.inf,
                np.inf,
                epsabs=1e-10,
                epsrel=1e-10,
            )
            return float(value)
        lower, upper = self.law.support()
        value, _ = integrate.quad(
            lambda x: self.law.pdf(x) ** 2, lower, upper, epsabs=1e-10, epsrel=1e-10
        )
        return float(value)

    def sample(self, n: int, seed: Seed) -> np.ndarray:
        return self.law.rvs(size=n, random_state=seed.generator(ERROR))


@dataclass
class SplitDesign:
    """Target column(s) and the remaining design"""

    xk: np.ndarray  # n x d target block
    Z: np.ndarray  # n x (p - d) remaining columns
    targets: Tuple[int, ...]  # 0-based indices into the original columns
    rest: Tuple[int, ...]  # 0-based indices of the columns of Z

    @property
    def x_target(self) -> np.ndarray:
        """The single target column as a vector"""
        if self.xk.shape[1] != 1:
            raise DataError("x_target needs exactly one target column")
        return self.xk[:, 0]


@dataclass
class Dataset:
    """Observed response vector and covariate matrix with column labels"""

    y: np.ndarray
    X: np.ndarray
    names: List[str] = field(default_factory=list)
    response: str = "y"

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        if self.y.ndim != 1:
            raise DataError("response must be a vector")
        if self.X.ndim != 2:
            raise DataError("covariates must form a matrix")
        n, p = self.X.shape
        if self.y.shape[0] != n:
            raise DataError(f"response has {self.y.shape[0]} rows, covariates {n}")
        if n < 2:
            raise DataError(f"need at least 2 observations, got {n}")
        if p < 2:
            raise DataError(f"need at least 2 covariates, got {p}")
        if not (np.isfinite(self.y).all() and np.isfinite(self.X).all()):
            raise DataError("all entries must be finite")
        if not self.names:
            self.names = [f"x{j + 1}" for j in range(p)]
        self.names = [str(name) for name in self.names]
        if len(self.names) != p:
            raise DataError(f"{len(self.names)} names for {p} columns")
        if len(set(self.names)) != p:
            raise DataError("column names must be unique")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def index_of(self, key: Union[str, int]) -> int:
        """Resolve a column name or a 1-based column number to a 0-based index"""
        if isinstance(key, str) and key in self.names:
            return self.names.index(key)
        try:
            number = int(key)
        except (TypeError, ValueError):
            raise DataError(f"Column '{key}' not found") from None
        if not 1 <= number <= self.p:
            raise DataError(f"Column number {number} outside 1..{self.p}")
        return number - 1

    def split(self, targets: Union[int, Sequence[int]]) -> SplitDesign:
        if isinstance(targets, (int, np.integer)):
            targets = [int(targets)]
        targets = tuple(int(k) for k in targets)
        if not targets:
            raise DataError("at least one target column is required")
        if len(set(targets)) != len(targets):
            raise DataError("target indices must be unique")
        if any(k < 0 or k >= self.p for k in targets):
            raise DataError(f"target indices must lie in [0, {self.p})")
        rest = tuple(j for j in range(self.p) if j not in set(targets))
        return SplitDesign(
            xk=self.X[:, list(targets)],
            Z=self.X[:, list(rest)],
            targets=targets,
            rest=rest,
        )

    def centered(self) -> "Dataset":
        return Dataset(
            y=center_columns(self.y),
            X=center_columns(self.X),
            names=list(self.names),
            response=self.response,
        )


def load_csv(
    path: Union[str, Path], response: str, predictors: Optional[Sequence[str]] = None
) -> Dataset:
    """Read a header-first CSV; every column other than the response is a predictor"""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Could not read {path}: {e}") from e

    if response not in frame.columns:
        raise DataError(f"Response column '{response}' not found in {path}")
    if predictors is None:
        predictors = [c for c in frame.columns if c != response]
    missing = [c for c in predictors if c not in frame.columns]
    if missing:
        raise DataError(f"Column '{missing[0]}' not found in {path}")

    try:
        numeric = frame[[response, *predictors]].apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as e:
        raise DataError(f"Non-numeric value in {path}: {e}") from e
    if numeric.isna().any().any():
        raise DataError(f"Missing values in {path}")

    logger.debug("Loaded %s: n=%d, p=%d", path, len(numeric), len(predictors))
    return Dataset(
        y=numeric[response].to_numpy(dtype=float),
        X=numeric[list(predictors)].to_numpy(dtype=float),
        names=[str(c) for c in predictors],
        response=str(response),
    )


def save_csv(data: Dataset, path: Union[str, Path]) -> None:
    frame = pd.DataFrame(data.X, columns=data.names)
    frame.insert(0, data.response, data.y)
    frame.to_csv(path, index=False)


def generate_ar1_gaussian(n: int, p: int, rho: float, seed: Seed) -> np.ndarray:
    """Rows i.i.d. N(0, Sigma) with Sigma[s, t] = rho ** |s - t|"""
    if n < 1 or p < 1:
        raise DataError("n and p must be at least 1")
    if not 0 <= rho < 1:
        raise DataError(f"rho must lie in [0, 1), got {rho}")
    W = seed.generator(DESIGN).standard_normal((n, p))
    X = np.empty((n, p), order="F")
    X[:, 0] = W[:, 0]
    innovation = np.sqrt(1.0 - rho**2)
    for t in range(1, p):
        X[:, t] = rho * X[:, t - 1] + innovation * W[:, t]
    return np.ascontiguousarray(X)


def sample_error(
    dist: Union[str, ErrorDistribution], n: int, seed: Seed
) -> np.ndarray:
    return ErrorDistribution.of(dist).sample(n, seed)


def ranks(v) -> np.ndarray:
    """R_i = #{j : v_j <= v_i} (ties share the maximum rank)"""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise DataError("ranks needs a non-empty vector")
    if not np.isfinite(v).all():
        raise DataError("ranks needs finite values")
    return stats.rankdata(v, method="max").astype(np.int64)


def center_columns(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    centered = M - M.mean(axis=0)
    # constant columns become exact zeros
    centered[..., np.ptp(M, axis=0) == 0] = 0.0
    return centered
