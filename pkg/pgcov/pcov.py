"""Partial covariance estimators and their variance estimates.

Each estimator takes its nuisance coefficients explicitly so that several
estimators can share one set of fits.
"""

from typing import Dict, Optional

import numpy as np
from datamodel import DataError, ranks
from models import FitResult, PartialCov


class SingularCovarianceError(np.linalg.LinAlgError):
    """Raised when the multivariate covariance estimate cannot be inverted"""

    def __init__(self, message: str, condition_number: float = float("inf")):
        super().__init__(f"{message} (condition number {condition_number:.3g})")
        self.condition_number = condition_number


def _vector(v, n: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise DataError(f"{what} has shape {v.shape}, expected ({n},)")
    return v


def _residuals(target, Z, coef, n: int, what: str) -> np.ndarray:
    """target - Z coef with dimension checks; coef may be a vector or a matrix"""
    Z = np.asarray(Z, dtype=float).reshape(n, -1)
    coef = np.asarray(coef, dtype=float)
    if coef.shape[0] != Z.shape[1]:
        raise DataError(
            f"{what} coefficients have length {coef.shape[0]}, design has "
            f"{Z.shape[1]} columns"
        )
    return np.asarray(target, dtype=float) - Z @ coef


def _gini_weights(e: np.ndarray) -> np.ndarray:
    n = e.shape[0]
    return ranks(e) / n - 0.5


def _scores(U: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return U.T @ weights / U.shape[0]


def _second_moment(U: np.ndarray) -> np.ndarray:
    return U.T @ U / U.shape[0]


def _gini_core(Y, XS, ZS, theta, Gamma):
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    XS = np.asarray(XS, dtype=float).reshape(n, -1)
    d = XS.shape[1]
    if d >= n:
        raise SingularCovarianceError(
            f"group of size d={d} needs fewer columns than observations n={n}"
        )
    Gamma = np.asarray(Gamma, dtype=float).reshape(-1, d)
    e = _residuals(Y, ZS, theta, n, "theta")
    U = _residuals(XS, ZS, Gamma, n, "Gamma")

    value = _scores(U, _gini_weights(e))
    variance = _second_moment(U) / 12.0
    return value, (variance + variance.T) / 2


def pgcov_hat(
    Y, xk, Z, theta, gamma, fits: Optional[Dict[str, FitResult]] = None
) -> PartialCov:
    """n^-1 sum_i u_i (R(e_i)/n - 1/2) with u = xk - Z gamma, e = Y - Z theta.

    Variance estimate (12n)^-1 sum_i u_i^2. Computed through the same path as
    the multivariate estimator, so a one-column group reproduces it exactly.
    """
    n = np.asarray(Y).shape[0]
    xk = _vector(xk, n, "target column")
    gamma = np.asarray(gamma, dtype=float).reshape(-1, 1)
    value, variance = _gini_core(Y, xk[:, None], Z, theta, gamma)
    return PartialCov(
        value=value[0], variance=variance[0, 0], kind="pgcov", fits=fits or {}
    )


def pgcov_multi_hat(
    Y, XS, ZS, theta, Gamma, fits: Optional[Dict[str, FitResult]] = None
) -> PartialCov:
    """Multivariate partial Gini covariance of Y with the columns of XS.

    Covariance estimate (12n)^-1 sum_i u_i u_i' with u_i = x_{S,i} - Gamma' z_{S,i}.
    """
    value, variance = _gini_core(Y, XS, ZS, theta, Gamma)
    return PartialCov(value=value, variance=variance, kind="pgcov", fits=fits or {})


def _pearson(Y, xk, Z, theta, gamma, kind: str, fits) -> PartialCov:
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    xk = _vector(xk, n, "target column")
    e = _residuals(Y, Z, theta, n, "theta")
    u = _residuals(xk, Z, gamma, n, "gamma")
    value = float(np.mean(e * u))
    variance = float(np.mean(e**2) * np.mean(u**2))
    return PartialCov(value=value, variance=variance, kind=kind, fits=fits or {})


def ppcov_hat(
    Y, xk, Z, theta_ls, gamma, fits: Optional[Dict[str, FitResult]] = None
) -> PartialCov:
    """Partial Pearson covariance from least-squares residuals of Y and xk"""
    return _pearson(Y, xk, Z, theta_ls, gamma, "ppcov", fits)


def ppcov_modified_hat(
    Y, xk, Z, theta_rank, gamma, fits: Optional[Dict[str, FitResult]] = None
) -> PartialCov:
    """Partial Pearson covariance with the rank-Lasso fit in place of least squares"""
    return _pearson(Y, xk, Z, theta_rank, gamma, "ppcov_rank", fits)


def quantile_score(r, tau: float) -> np.ndarray:
    """psi_tau(r) = tau - 1(r < 0); psi_tau(0) = tau"""
    return tau - (np.asarray(r, dtype=float) < 0)


def pqcov_hat(
    Y,
    xk,
    Z,
    tau: float,
    qfit: FitResult,
    gamma,
    fits: Optional[Dict[str, FitResult]] = None,
) -> PartialCov:
    """n^-1 sum psi_tau(Y_i - theta'z_i - eta) u_i.

    Variance estimate (tau - tau^2) mean(u^2).
    """
    if not 0 < tau < 1:
        raise DataError(f"tau must lie in (0, 1), got {tau}")
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    xk = _vector(xk, n, "target column")
    e = _residuals(Y, Z, qfit.coef, n, "quantile") - qfit.intercept
    u = _residuals(xk, Z, gamma, n, "gamma")
    value = float(np.mean(quantile_score(e, tau) * u))
    variance = float((tau - tau**2) * np.mean(u**2))
    return PartialCov(
        value=value, variance=variance, kind="pqcov", tau=tau, fits=fits or {}
    )
