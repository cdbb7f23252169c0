import logging
import math
from typing import List, Optional, Sequence, Union

import numpy as np
from config import Config
from datamodel import Dataset, ErrorDistribution, Seed
from methods import (
    GiniMethod,
    MethodRegistry,
    NuisanceFits,
    PearsonMethod,
    PearsonModifiedMethod,
    QuantileMethod,
)
from models import AREResult, PartialCov, TestResult, TuningOptions
from pcov import SingularCovarianceError
from scipy import linalg, stats

logger = logging.getLogger(__name__)


class DegenerateStatisticError(ArithmeticError):
    """Raised when the variance estimate of the target residual is zero"""


class InfiniteVarianceError(ValueError):
    """Raised when an efficiency comparison needs a finite error variance"""


def normal_pvalue_two_sided(z: float) -> float:
    return float(2.0 * stats.norm.sf(abs(z)))


def chisq_pvalue(w: float, d: int) -> float:
    if d < 1:
        raise ValueError(f"degrees of freedom must be at least 1, got {d}")
    if w <= 0:
        return 1.0
    return float(stats.chi2.sf(w, d))


def are_gini_vs_pearson(dist: Union[str, ErrorDistribution]) -> AREResult:
    """12 var(eps) f0^2, with f0 the density of eps1 - eps2 at zero"""
    dist = ErrorDistribution.of(dist)
    if not math.isfinite(dist.variance):
        raise InfiniteVarianceError(
            f"ARE undefined: infinite variance for {dist.label}"
        )
    var, f0 = dist.variance, dist.f0
    return AREResult(
        distribution=dist.name, are=12 * var * f0**2, var_used=var, f0_used=f0
    )


def predicted_local_power(
    beta0, Sigma_GS, f0: float, d: int, alpha: float = 0.05
) -> float:
    """Power of the level-alpha chi-square_d test.

    Noncentrality 144 f0^2 b'Sigma b.
    """
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    Sigma_GS = np.atleast_2d(np.asarray(Sigma_GS, dtype=float))
    noncentrality = 144.0 * f0**2 * float(beta0 @ Sigma_GS @ beta0)
    if noncentrality <= 0:
        return float(alpha)
    critical = stats.chi2.isf(alpha, d)
    return float(stats.ncx2.sf(critical, d, noncentrality))


def predicted_local_power_normal(
    beta_k: float, f0: float, u_second_moment: float, alpha: float = 0.05
) -> float:
    """Univariate power through the normal mean shift f0 beta E(u^2) / sigma_G.

    sigma_G^2 = E(u^2) / 12; agrees with the chi-square_1 path.
    """
    sigma = math.sqrt(u_second_moment / 12.0)
    shift = f0 * beta_k * u_second_moment / sigma
    z = stats.norm.isf(alpha / 2)
    return float(stats.norm.sf(z - shift) + stats.norm.cdf(-z - shift))


class InferenceEngine:
    """Main orchestrator for partial covariance tests"""

    def __init__(self, config: Config):
        self.config = config

        # Register the available methods
        self.registry = MethodRegistry()
        self.gini = GiniMethod()
        self.registry.register(self.gini)
        self.registry.register(PearsonMethod())
        self.registry.register(PearsonModifiedMethod())
        self.registry.register(QuantileMethod(config.QUANTILE_TAU))

    def prepare(
        self,
        data: Dataset,
        targets: Union[int, Sequence[int]],
        seed: Optional[Seed] = None,
        tuning: Optional[TuningOptions] = None,
    ) -> NuisanceFits:
        """Center the data, split off the target block and set up shared fits"""
        centered = data.centered()
        split = centered.split(targets)
        fits = NuisanceFits(
            centered.y,
            split.xk,
            split.Z,
            self.config,
            seed or Seed(value=0),
            tuning,
            p_total=data.p,
            target_names=[data.names[k] for k in split.targets],
        )
        return fits

    def _lambdas(self, pcov: PartialCov) -> dict:
        return {name: fit.lam for name, fit in pcov.fits.items()}

    def evaluate(
        self, fits: NuisanceFits, method: str, alpha: Optional[float] = None
    ) -> TestResult:
        """Run one method's univariate test on prepared fits"""
        alpha = self.config.ALPHA if alpha is None else alpha
        estimator = self.registry.get(method)
        pcov = estimator.estimate(fits)

        variance = float(pcov.variance)
        if variance <= 0:
            raise DegenerateStatisticError("degenerate target residual")
        statistic = math.sqrt(fits.n) * float(pcov.value) / math.sqrt(variance)
        p_value = normal_pvalue_two_sided(statistic)

        notes = estimator.notes(fits, pcov)
        converged = all(fit.converged for fit in pcov.fits.values())
        if not converged:
            stalled = [name for name, fit in pcov.fits.items() if not fit.converged]
            logger.warning("%s: nuisance fits did not converge: %s", method, stalled)
            notes.append(f"nuisance fits did not converge: {', '.join(stalled)}")

        return TestResult(
            statistic=statistic,
            df=0,
            p_value=p_value,
            method=method,
            alpha=alpha,
            reject=p_value < alpha,
            pcov=pcov,
            lambdas=self._lambdas(pcov),
            targets=fits.target_names,
            n=fits.n,
            converged=converged,
            notes=notes,
            schema_version=self.config.REPORT_FORMAT_VERSION,
        )

    def test_methods(
        self,
        data: Dataset,
        k: int,
        methods: Sequence[str],
        alpha: Optional[float] = None,
        seed: Optional[Seed] = None,
        tuning: Optional[TuningOptions] = None,
    ) -> List[TestResult]:
        """Test H0: beta_k = 0 with several methods sharing one set of fits"""
        fits = self.prepare(data, k, seed, tuning)
        return [self.evaluate(fits, method, alpha) for method in methods]

    def test_univariate(
        self,
        data: Dataset,
        k: int,
        method: str = "pgcov",
        alpha: Optional[float] = None,
        seed: Optional[Seed] = None,
        tuning: Optional[TuningOptions] = None,
    ) -> TestResult:
        """Test H0: beta_k = 0 (k is a 0-based column index)"""
        return self.test_methods(data, k, [method], alpha, seed, tuning)[0]

    def evaluate_group(
        self, fits: NuisanceFits, alpha: Optional[float] = None
    ) -> TestResult:
        alpha = self.config.ALPHA if alpha is None else alpha
        pcov = self.gini.estimate_group(fits)
        d = pcov.dim
        try:
            factor = linalg.cho_factor(pcov.variance)
        except linalg.LinAlgError:
            raise SingularCovarianceError(
                "covariance estimate of the target residuals is singular",
                float(np.linalg.cond(pcov.variance)),
            ) from None
        value = np.asarray(pcov.value)
        statistic = fits.n * float(value @ linalg.cho_solve(factor, value))
        p_value = chisq_pvalue(statistic, d)

        converged = all(fit.converged for fit in pcov.fits.values())
        notes = []
        if not converged:
            logger.warning("group test: nuisance fits did not converge")
            notes.append("nuisance fits did not converge")

        return TestResult(
            statistic=statistic,
            df=d,
            p_value=p_value,
            method=self.gini.name,
            alpha=alpha,
            reject=p_value < alpha,
            pcov=pcov,
            lambdas=self._lambdas(pcov),
            targets=fits.target_names,
            n=fits.n,
            converged=converged,
            notes=notes,
            schema_version=self.config.REPORT_FORMAT_VERSION,
        )

    def group_test(
        self,
        data: Dataset,
        S: Sequence[int],
        alpha: Optional[float] = None,
        seed: Optional[Seed] = None,
        tuning: Optional[TuningOptions] = None,
    ) -> TestResult:
        """Chi-square test of H0: beta_S = 0 (0-based column indices)"""
        fits = self.prepare(data, list(S), seed, tuning)
        return self.evaluate_group(fits, alpha)
