from typing import Annotated, Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    computed_field,
    model_validator,
)

# numpy arrays travel through the containers as float ndarrays and serialize as lists
FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(lambda v: np.asarray(v, dtype=float)),
    PlainSerializer(lambda a: np.asarray(a).tolist(), return_type=Any),
]


class SolverOptions(BaseModel):
    """Stopping rules for the penalized solvers"""

    max_iter: int = Field(5000, ge=1)  # Iteration cap (ADMM steps or CD sweeps)
    tol: float = Field(1e-6, gt=0)  # Residual / KKT tolerance
    admm_rho: float = Field(1.0, gt=0)  # Augmented Lagrangian parameter
    restart: bool = True  # Residual balancing of admm_rho


class FitResult(BaseModel):
    """Output of one penalized fit"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    coef: FloatArray  # theta or gamma, on the covariates passed to the solver
    intercept: float = 0.0  # Only the quantile fit estimates one
    lam: float = Field(ge=0)  # Penalty level used
    objective: float  # Objective re-evaluated at coef
    iterations: int = 0
    converged: bool = True

    @computed_field
    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.coef))

    @model_validator(mode="after")
    def _finite_objective(self) -> "FitResult":
        if not np.isfinite(self.objective):
            raise ValueError("objective must be finite")
        return self


class PartialCov(BaseModel):
    """A partial covariance estimate bundled with its variance estimate.

    Univariate estimates carry 0-d arrays; multivariate ones a d-vector value and
    a d x d variance matrix.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    value: FloatArray
    variance: FloatArray
    kind: str  # pgcov, ppcov, ppcov_rank or pqcov
    tau: Optional[float] = None  # Quantile level for pqcov
    fits: Dict[str, FitResult] = {}  # Nuisance fits the estimate was built from

    @model_validator(mode="after")
    def _shapes_agree(self) -> "PartialCov":
        if self.value.ndim == 0:
            if self.variance.ndim != 0:
                raise ValueError("scalar estimate needs a scalar variance")
            if self.variance < 0:
                raise ValueError("variance must be non-negative")
        else:
            d = self.value.shape[0]
            if self.variance.shape != (d, d):
                raise ValueError(
                    f"variance shape {self.variance.shape} does not match d={d}"
                )
            if not np.allclose(self.variance, self.variance.T, rtol=0, atol=1e-12):
                raise ValueError("variance matrix must be symmetric")
        return self

    @property
    def dim(self) -> int:
        return 1 if self.value.ndim == 0 else int(self.value.shape[0])


class TuningOptions(BaseModel):
    """Penalty overrides; None means use the configured rule"""

    lambda_theta: Optional[float] = Field(None, ge=0)  # rank-Lasso, else pivotal
    lambda_x: Union[float, Literal["default", "cv"]] = "default"  # node-wise Lasso
    lambda_y: Optional[float] = Field(None, ge=0)  # least-squares Lasso of Y
    lambda_q: Optional[float] = Field(None, ge=0)  # quantile Lasso
    pivotal_c: Optional[float] = Field(None, gt=1)
    pivotal_alpha0: Optional[float] = Field(None, gt=0, lt=1)
    pivotal_draws: Optional[int] = Field(None, ge=1)


class TestResult(BaseModel):
    """Outcome of a univariate or group test"""

    __test__ = False  # not a pytest class

    statistic: float
    df: int = Field(ge=0)  # 0 = standard normal reference, d = chi-square_d
    p_value: float = Field(ge=0, le=1)
    method: str
    alpha: float = Field(gt=0, lt=1)
    reject: bool
    pcov: PartialCov
    lambdas: Dict[str, float] = {}  # Tuning values used, by nuisance fit
    targets: List[str] = []  # Column names under test
    n: int = 0
    converged: bool = True  # False if any nuisance fit hit max_iter
    notes: List[str] = []  # Diagnostics (heavy tails, weak power, convergence)
    schema_version: str = "1.0"

    @model_validator(mode="after")
    def _decision_matches_pvalue(self) -> "TestResult":
        if self.reject != (self.p_value < self.alpha):
            raise ValueError("reject must equal p_value < alpha")
        return self


class AREResult(BaseModel):
    """Asymptotic relative efficiency of the Gini test against the Pearson test"""

    distribution: str
    are: float
    var_used: float
    f0_used: float
    schema_version: str = "1.0"


class StudyConfig(BaseModel):
    """Knobs of one Monte Carlo study"""

    study: Literal["size", "power", "group"] = "size"
    n: int = Field(200, ge=2)
    p: int = Field(100, ge=2)
    rho: float = Field(0.5, ge=0, lt=1)  # AR(1) correlation of the design
    beta: List[float] = [1.0] * 10  # Leading coefficients, zero-padded to p
    error: str = "normal"
    methods: List[str] = ["pgcov", "pqcov", "ppcov", "ppcov_rank"]
    reps: int = Field(500, ge=1)
    alpha: float = Field(0.05, gt=0, lt=1)
    target: List[int] = [10]  # 0-based; one index for univariate studies
    grid: List[float] = []  # Signal levels swept by the study
    vary: List[int] = []  # 0-based coefficients set to each grid value (group)
    seed: int = Field(0, ge=0, lt=2**64)
    # Worker count; kept out of serialized reports so they match across machines
    parallelism: int = Field(1, ge=1, exclude=True)
    tau: float = Field(0.5, gt=0, lt=1)

    @model_validator(mode="after")
    def _indices_valid(self) -> "StudyConfig":
        if len(self.beta) > self.p:
            raise ValueError(f"beta has {len(self.beta)} entries but p={self.p}")
        for name in ("target", "vary"):
            idx = getattr(self, name)
            if any(i < 0 or i >= self.p for i in idx):
                raise ValueError(f"{name} indices must lie in [0, {self.p})")
            if len(set(idx)) != len(idx):
                raise ValueError(f"{name} indices must be unique")
        if not self.target:
            raise ValueError("target must name at least one coefficient")
        if any(g < 0 for g in self.grid):
            raise ValueError("grid values must be non-negative")
        return self

    def beta_vector(self) -> np.ndarray:
        beta = np.zeros(self.p)
        beta[: len(self.beta)] = self.beta
        return beta


class ReplicationRecord(BaseModel):
    """One method's outcome on one replication"""

    method: str
    rep: int
    grid_value: float
    statistic: Optional[float] = None
    p_value: Optional[float] = None
    reject: bool = False
    converged: bool = True
    error: Optional[str] = None  # Set when the replication failed

    @classmethod
    def failed(
        cls, method: str, rep: int, grid_value: float, error: str
    ) -> "ReplicationRecord":
        """Create a failure record; failures count as non-rejections"""
        return cls(
            method=method, rep=rep, grid_value=grid_value, reject=False, error=error
        )


class RateRow(BaseModel):
    """Rejection rate of one method at one grid point"""

    method: str
    grid_value: float
    rate: float = Field(ge=0, le=1)
    se: float = Field(ge=0)  # Binomial standard error over reps_effective
    reps: int
    reps_effective: int = Field(0, ge=0)  # Replications that produced a decision
    failures: int = 0
    nonconverged: int = 0


class StudyReport(BaseModel):
    """Aggregated Monte Carlo study"""

    format_version: str = "1.0"
    config: StudyConfig
    grid: List[float]
    rows: List[RateRow]
    records: List[ReplicationRecord]
    runtime_seconds: float = 0.0
    valid: bool = True
    flags: List[str] = []
    omitted_methods: List[str] = ["dBeta", "dBeta_b"]

    @model_validator(mode="after")
    def _record_count(self) -> "StudyReport":
        expected = self.config.reps * len(self.config.methods) * len(self.grid)
        if len(self.records) != expected:
            raise ValueError(
                f"expected {expected} replication records, got {len(self.records)}"
            )
        return self

    @property
    def failure_rate(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.error is not None for r in self.records) / len(self.records)

    def rate(self, method: str, grid_value: Optional[float] = None) -> float:
        """Rejection rate of a method (at a grid point, or the only one)"""
        rows = [r for r in self.rows if r.method == method]
        if grid_value is not None:
            rows = [r for r in rows if np.isclose(r.grid_value, grid_value)]
        if len(rows) != 1:
            raise KeyError(f"no unique row for method '{method}' at {grid_value}")
        return rows[0].rate
