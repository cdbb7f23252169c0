from abc import ABC, abstractmethod
from functools import cached_property
from typing import Any, Dict, List, Optional

import numpy as np
from config import Config
from datamodel import Seed
from models import FitResult, PartialCov, SolverOptions, TuningOptions
from pcov import (
    pgcov_hat,
    pgcov_multi_hat,
    ppcov_hat,
    ppcov_modified_hat,
    pqcov_hat,
)
from solvers import (
    lasso_lambda_cv,
    lasso_lambda_default,
    lasso_ls_fit,
    pivotal_lambda,
    quantile_lambda_default,
    quantile_lasso_fit,
    rank_lasso_fit,
)

WEAK_POWER_NOTE = (
    "quantile score has a discontinuous derivative; local power can be very "
    "small when the error density at the quantile is low"
)


class NuisanceFits:
    """Nuisance fits for one (response, target block, remaining design) split.

    Every fit is computed on first use and then shared by all methods that
    need it, so comparing several methods on the same data refits nothing.
    Inputs are expected to be column-centered.
    """

    def __init__(
        self,
        Y: np.ndarray,
        XS: np.ndarray,
        Z: np.ndarray,
        config: Config,
        seed: Seed,
        tuning: Optional[TuningOptions] = None,
        p_total: Optional[int] = None,
        target_names: Optional[List[str]] = None,
    ):
        self.Y = Y
        self.XS = XS.reshape(Y.shape[0], -1)
        self.Z = Z
        self.config = config
        self.seed = seed
        self.tuning = tuning or TuningOptions()
        self.p_total = p_total or (self.Z.shape[1] + self.XS.shape[1])
        self.target_names = target_names or []
        self.admm_options: SolverOptions = config.solver_options()
        self.lasso_options: SolverOptions = config.lasso_options()
        self._quantile_fits: Dict[float, FitResult] = {}

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def xk(self) -> np.ndarray:
        return self.XS[:, 0]

    def _lambda_x(self, x: np.ndarray) -> float:
        rule = self.tuning.lambda_x
        if rule == "cv":
            return lasso_lambda_cv(
                x, self.Z, self.config.CV_FOLDS, self.seed, opts=self.lasso_options
            )
        if rule == "default":
            return lasso_lambda_default(
                self.Z, x, p=self.p_total, scale=self.config.LASSO_LAMBDA_SCALE
            )
        return float(rule)

    @cached_property
    def gamma_fits(self) -> List[FitResult]:
        """Node-wise Lasso of each target column on the remaining design"""
        return [
            lasso_ls_fit(x, self.Z, self._lambda_x(x), self.lasso_options)
            for x in self.XS.T
        ]

    @property
    def gamma(self) -> np.ndarray:
        return self.gamma_fits[0].coef

    @property
    def Gamma(self) -> np.ndarray:
        return np.column_stack([fit.coef for fit in self.gamma_fits])

    @cached_property
    def lambda_theta(self) -> float:
        if self.tuning.lambda_theta is not None:
            return self.tuning.lambda_theta
        return pivotal_lambda(
            self.Z,
            alpha0=self.tuning.pivotal_alpha0 or self.config.PIVOTAL_ALPHA0,
            c=self.tuning.pivotal_c or self.config.PIVOTAL_C,
            B=self.tuning.pivotal_draws or self.config.PIVOTAL_DRAWS,
            seed=self.seed,
        )

    @cached_property
    def rank_fit(self) -> FitResult:
        return rank_lasso_fit(self.Y, self.Z, self.lambda_theta, self.admm_options)

    @cached_property
    def ls_fit(self) -> FitResult:
        """Least-squares Lasso of Y on the remaining design"""
        lam = self.tuning.lambda_y
        if lam is None:
            lam = lasso_lambda_default(
                self.Z, self.Y, p=self.p_total, scale=self.config.LASSO_LAMBDA_SCALE
            )
        return lasso_ls_fit(self.Y, self.Z, lam, self.lasso_options)

    def quantile_fit(self, tau: float) -> FitResult:
        if tau not in self._quantile_fits:
            lam = self.tuning.lambda_q
            if lam is None:
                lam = quantile_lambda_default(
                    self.Z, tau, p=self.p_total, scale=self.config.LASSO_LAMBDA_SCALE
                )
            self._quantile_fits[tau] = quantile_lasso_fit(
                self.Y, self.Z, tau, lam, self.admm_options
            )
        return self._quantile_fits[tau]


class PartialCovMethod(ABC):
    """Abstract base class for partial covariance test methods"""

    name: str = ""

    @abstractmethod
    def describe(self) -> Dict[str, Any]:
        """Return a short description of the estimator and its nuisance fits"""
        pass

    @abstractmethod
    def estimate(self, fits: NuisanceFits) -> PartialCov:
        """Estimate the partial covariance of the single target column"""
        pass

    def notes(self, fits: NuisanceFits, pcov: PartialCov) -> List[str]:
        return []


class GiniMethod(PartialCovMethod):
    """Partial Gini covariance: rank-Lasso for Y, Lasso for the target column"""

    name = "pgcov"

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": "Partial Gini covariance (rank-Lasso residual ranks)",
            "fits": ["rank_fit", "gamma"],
        }

    def estimate(self, fits: NuisanceFits) -> PartialCov:
        return pgcov_hat(
            fits.Y,
            fits.xk,
            fits.Z,
            fits.rank_fit.coef,
            fits.gamma,
            fits={"theta": fits.rank_fit, "gamma": fits.gamma_fits[0]},
        )

    def estimate_group(self, fits: NuisanceFits) -> PartialCov:
        """Multivariate estimate over every column of the target block"""
        return pgcov_multi_hat(
            fits.Y,
            fits.XS,
            fits.Z,
            fits.rank_fit.coef,
            fits.Gamma,
            fits={
                "theta": fits.rank_fit,
                **{f"gamma_{j}": fit for j, fit in enumerate(fits.gamma_fits)},
            },
        )


def hill_tail_index(residuals: np.ndarray, fraction: float = 0.1) -> float:
    """Hill estimate of the tail index of |residuals| from the top fraction"""
    a = np.sort(np.abs(residuals))[::-1]
    k = max(2, int(fraction * a.shape[0]))
    if k >= a.shape[0] or a[k] <= 0:
        return float("inf")
    mean_log = float(np.mean(np.log(a[:k] / a[k])))
    return float("inf") if mean_log == 0 else 1.0 / mean_log


class _PearsonBase(PartialCovMethod):
    def notes(self, fits: NuisanceFits, pcov: PartialCov) -> List[str]:
        resid = fits.Y - fits.Z @ pcov.fits["theta"].coef
        index = hill_tail_index(resid)
        if index < 2:
            return [
                f"heavy-tailed response residuals (tail index about {index:.2f}); "
                "the Pearson test assumes finite error variance"
            ]
        return []


class PearsonMethod(_PearsonBase):
    """Partial Pearson covariance from least-squares Lasso residuals"""

    name = "ppcov"

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": "Partial Pearson covariance (least-squares Lasso)",
            "fits": ["ls_fit", "gamma"],
        }

    def estimate(self, fits: NuisanceFits) -> PartialCov:
        return ppcov_hat(
            fits.Y,
            fits.xk,
            fits.Z,
            fits.ls_fit.coef,
            fits.gamma,
            fits={"theta": fits.ls_fit, "gamma": fits.gamma_fits[0]},
        )


class PearsonModifiedMethod(_PearsonBase):
    """Partial Pearson covariance with rank-Lasso residuals for Y"""

    name = "ppcov_rank"

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": "Partial Pearson covariance with rank-Lasso fit for Y",
            "fits": ["rank_fit", "gamma"],
        }

    def estimate(self, fits: NuisanceFits) -> PartialCov:
        return ppcov_modified_hat(
            fits.Y,
            fits.xk,
            fits.Z,
            fits.rank_fit.coef,
            fits.gamma,
            fits={"theta": fits.rank_fit, "gamma": fits.gamma_fits[0]},
        )


class QuantileMethod(PartialCovMethod):
    """Partial quantile covariance at level tau"""

    name = "pqcov"

    def __init__(self, tau: float = 0.5):
        if not 0 < tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {tau}")
        self.tau = tau

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": f"Partial quantile covariance at tau={self.tau}",
            "fits": ["quantile_fit", "gamma"],
        }

    def estimate(self, fits: NuisanceFits) -> PartialCov:
        qfit = fits.quantile_fit(self.tau)
        return pqcov_hat(
            fits.Y,
            fits.xk,
            fits.Z,
            self.tau,
            qfit,
            fits.gamma,
            fits={"theta": qfit, "gamma": fits.gamma_fits[0]},
        )

    def notes(self, fits: NuisanceFits, pcov: PartialCov) -> List[str]:
        return [WEAK_POWER_NOTE]


class MethodRegistry:
    """Registry of the available partial covariance methods"""

    def __init__(self):
        self.methods: Dict[str, PartialCovMethod] = {}

    def register(self, method: PartialCovMethod):
        """Register any method that implements the PartialCovMethod interface"""
        if not method.name:
            raise ValueError("Method must have a name")
        self.methods[method.name] = method

    def get(self, name: str) -> PartialCovMethod:
        if name not in self.methods:
            raise ValueError(
                f"Method '{name}' not found (available: {', '.join(self.names())})"
            )
        return self.methods[name]

    def names(self) -> List[str]:
        return list(self.methods)

    def describe_all(self) -> List[Dict[str, Any]]:
        return [method.describe() for method in self.methods.values()]
