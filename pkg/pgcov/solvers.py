"""Penalized convex solvers.

Rank-Lasso and quantile Lasso are solved by two-block ADMM with an exact l1
(or check-loss) proximal step; the least-squares Lasso by coordinate descent
with active-set sweeps. Every solver returns a FitResult whose objective is
re-evaluated at the returned coefficients.
"""

import logging
import math
from collections import deque
from typing import Optional

import numpy as np
from datamodel import CV, PIVOTAL, Seed, center_columns
from models import FitResult, SolverOptions
from scipy import optimize
from sklearn.model_selection import KFold

logger = logging.getLogger(__name__)

# Residual balancing: rescale rho by TAU when one residual exceeds MU times the other
BALANCE_MU = 10.0
BALANCE_TAU = 2.0

# Steps over which the best objective must stall for the loose residual test
STALL_WINDOW = 50

ORACLE_MAX_N = 30
ORACLE_MAX_P = 6


class SolverError(RuntimeError):
    """Raised when a solver cannot be run on its input"""


def shrinkage(x, kappa):
    return np.maximum(0, x - kappa) - np.maximum(0, -x - kappa)


def check_loss(r, tau: float):
    r = np.asarray(r, dtype=float)
    return r * (tau - (r < 0))


def _prox_check(v: np.ndarray, tau: float, t: float) -> np.ndarray:
    """argmin_x t * check_loss(x) + (x - v)^2 / 2"""
    return np.where(
        v > t * tau, v - t * tau, np.where(v < -t * (1 - tau), v + t * (1 - tau), 0.0)
    )


def _as_design(Z, n: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(n, -1)
    if Z.shape[0] != n:
        raise SolverError(f"design has {Z.shape[0]} rows, response {n}")
    return Z


def _check_lambda(lam: float):
    if not lam >= 0:
        raise SolverError(f"lambda must be non-negative, got {lam}")


class _Pairs:
    """All row differences v_i - v_j with i < j, applied without forming D"""

    def __init__(self, n: int):
        self.n = n
        self.i, self.j = np.triu_indices(n, k=1)

    @property
    def size(self) -> int:
        return self.i.size

    def diff(self, v: np.ndarray) -> np.ndarray:
        return v[self.i] - v[self.j]

    def scatter(self, w: np.ndarray) -> np.ndarray:
        """Adjoint of diff: a_i = sum_j w_ij - sum_j w_ji"""
        return np.bincount(self.i, w, self.n) - np.bincount(self.j, w, self.n)


class _RidgeSolver:
    """Solves (a Z^T Z + b I) x = rhs for any a, b > 0 from one thin SVD of Z.

    Works for skinny and fat Z alike; the complement of the row space is
    handled in closed form when Z has more columns than rows.
    """

    def __init__(self, Z: np.ndarray):
        _, s, Vt = np.linalg.svd(Z, full_matrices=False)
        self.V = Vt.T
        self.s2 = s**2
        self.full = self.V.shape[1] == Z.shape[1]

    def solve(self, a: float, b: float, rhs: np.ndarray) -> np.ndarray:
        proj = self.V.T @ rhs
        x = self.V @ (proj / (a * self.s2 + b))
        if not self.full:
            x += (rhs - self.V @ proj) / b
        return x


def rank_lasso_objective(Y, Z, coef, lam: float) -> float:
    """{n(n-1)}^-1 sum_i sum_{j != i} |e_i - e_j| + lam * ||coef||_1, e = Y - Z coef"""
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    coef = np.asarray(coef, dtype=float)
    e = Y - _as_design(Z, n) @ coef if coef.size else Y.copy()
    e.sort()
    # the k-th smallest residual enters k times positively and n-1-k times negatively
    weights = 2.0 * np.arange(n) - n + 1
    pair_sum = float(weights @ e)
    return 2.0 * pair_sum / (n * (n - 1)) + lam * float(np.abs(coef).sum())


def quantile_lasso_objective(Y, Z, coef, intercept: float, tau: float, lam: float):
    Y = np.asarray(Y, dtype=float)
    coef = np.asarray(coef, dtype=float)
    fitted = _as_design(Z, Y.shape[0]) @ coef if coef.size else 0.0
    loss = check_loss(Y - fitted - intercept, tau).mean()
    return float(loss) + lam * float(np.abs(coef).sum())


def lasso_objective(x, Z, coef, lam: float) -> float:
    x = np.asarray(x, dtype=float)
    coef = np.asarray(coef, dtype=float)
    resid = x - _as_design(Z, x.shape[0]) @ coef if coef.size else x
    return float(resid @ resid) / (2 * x.shape[0]) + lam * float(np.abs(coef).sum())


def _tau_quantile(e: np.ndarray, tau: float) -> float:
    """Order statistic e_(k), k = ceil(n tau).

    An exact minimizer of sum check_loss(e - eta) over eta.
    """
    k = max(1, math.ceil(e.shape[0] * tau - 1e-9))
    return float(np.partition(e, k - 1)[k - 1])


def _balance(primal: float, dual: float) -> float:
    if primal > BALANCE_MU * dual:
        return BALANCE_TAU
    if dual > BALANCE_MU * primal:
        return 1.0 / BALANCE_TAU
    return 1.0


class _Certificate:
    """Stopping rule shared by the ADMM solvers.

    Converged when the primal and dual residuals meet tol in absolute and
    relative terms, or when they meet sqrt(tol) relative and the re-evaluated
    best objective moved by at most tol (relative) over STALL_WINDOW steps.
    """

    def __init__(self, tol: float, primal_dim: int, dual_dim: int):
        self.tol = tol
        self.loose = math.sqrt(tol)
        self.abs_primal = math.sqrt(primal_dim) * tol
        self.abs_dual = math.sqrt(dual_dim) * tol
        self.history = deque(maxlen=STALL_WINDOW + 1)

    def _residuals_met(self, rel, primal, dual, primal_scale, dual_scale) -> bool:
        return (
            primal <= self.abs_primal + rel * primal_scale
            and dual <= self.abs_dual + rel * dual_scale
        )

    def met(
        self,
        best_obj: float,
        primal: float,
        dual: float,
        primal_scale: float,
        dual_scale: float,
    ) -> bool:
        self.history.append(best_obj)
        if self._residuals_met(self.tol, primal, dual, primal_scale, dual_scale):
            return True
        if len(self.history) <= STALL_WINDOW:
            return False
        moved = self.history[0] - best_obj
        return moved <= self.tol * max(1.0, abs(best_obj)) and self._residuals_met(
            self.loose, primal, dual, primal_scale, dual_scale
        )


def rank_lasso_fit(
    Y, Z, lam: float, opts: Optional[SolverOptions] = None
) -> FitResult:
    """Regularized Gini regression.

    Minimizes {n(n-1)}^-1 sum_i sum_{j != i} |(Y_i - theta'z_i) - (Y_j - theta'z_j)|
    + lam ||theta||_1. Multiplying by m = n(n-1)/2 gives the pairwise LAD-Lasso
    ||d - D theta||_1 + m lam ||theta||_1, solved by ADMM over the splitting
    r = d - D theta, w = theta. D is never formed: D theta is a difference of
    the fitted values and D'v a scatter of pair weights, and D'D = n Zc'Zc.

    Returns the best sparse iterate seen; converged reports whether the
    stopping rule of _Certificate was met within max_iter.
    """
    _check_lambda(lam)
    opts = opts or SolverOptions()
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    if n < 2:
        raise SolverError("rank-Lasso needs at least 2 observations")
    Z = _as_design(Z, n)
    q = Z.shape[1]
    if q == 0:
        empty = np.zeros(0)
        return FitResult(
            coef=empty, lam=lam, objective=rank_lasso_objective(Y, Z, empty, lam)
        )

    Zc = center_columns(Z)
    pairs = _Pairs(n)
    m = pairs.size
    d = pairs.diff(Y)
    ridge = _RidgeSolver(Zc)

    trace = n * float(ridge.s2.sum())
    rho1 = opts.admm_rho
    rho2 = rho1 * (trace / q if trace > 0 else 1.0)
    kappa = m * lam

    w = np.zeros(q)
    u2 = np.zeros(q)
    r = d.copy()
    u1 = np.zeros(m)

    best = w.copy()
    best_obj = rank_lasso_objective(Y, Zc, best, lam)
    converged = False
    certificate = _Certificate(opts.tol, m + q, q)
    iteration = 0
    for iteration in range(1, opts.max_iter + 1):
        rhs = rho1 * (Zc.T @ pairs.scatter(d - r - u1)) + rho2 * (w - u2)
        theta = ridge.solve(rho1 * n, rho2, rhs)
        d_theta = pairs.diff(Zc @ theta)

        r_old = r
        r = shrinkage(d - d_theta - u1, 1.0 / rho1)
        w_old = w
        w = shrinkage(theta + u2, kappa / rho2)

        res1 = d_theta + r - d
        res2 = theta - w
        u1 += res1
        u2 += res2

        obj = rank_lasso_objective(Y, Zc, w, lam)
        if obj < best_obj:
            best_obj, best = obj, w.copy()

        primal = math.sqrt(res1 @ res1 + res2 @ res2)
        dual_vec = rho1 * (Zc.T @ pairs.scatter(r - r_old)) - rho2 * (w - w_old)
        dual = float(np.linalg.norm(dual_vec))
        primal_scale = max(
            math.sqrt(d_theta @ d_theta + theta @ theta),
            math.sqrt((r - d) @ (r - d) + w @ w),
        )
        # A'y vanishes at a solution; its blocks set the dual scale
        dual_scale = max(
            rho1 * float(np.linalg.norm(Zc.T @ pairs.scatter(u1))),
            rho2 * float(np.linalg.norm(u2)),
        )
        if certificate.met(best_obj, primal, dual, primal_scale, dual_scale):
            converged = True
            break

        if opts.restart:
            factor = _balance(primal, dual)
            if factor != 1.0:
                rho1 *= factor
                rho2 *= factor
                u1 /= factor
                u2 /= factor

    if not converged:
        logger.warning(
            "rank-Lasso stopped after %d iterations without meeting tol=%g",
            iteration,
            opts.tol,
        )
    logger.debug("rank-Lasso: %d iterations, objective %.6g", iteration, best_obj)
    return FitResult(
        coef=best,
        lam=lam,
        objective=rank_lasso_objective(Y, Z, best, lam),
        iterations=iteration,
        converged=converged,
    )


def quantile_lasso_fit(
    Y, Z, tau: float, lam: float, opts: Optional[SolverOptions] = None
) -> FitResult:
    """Penalized quantile regression with an unpenalized intercept.

    Minimizes n^-1 sum check_loss(Y_i - theta'z_i - eta) + lam ||theta||_1 by ADMM
    on r = Y - Zc theta - eta, w = theta. With centered Zc the intercept update
    decouples into a mean. The reported intercept is re-optimized exactly for
    the returned theta as an order statistic of the residuals, on the original
    (uncentered) Z.
    """
    _check_lambda(lam)
    if not 0 < tau < 1:
        raise SolverError(f"tau must lie in (0, 1), got {tau}")
    opts = opts or SolverOptions()
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    Z = _as_design(Z, n)
    q = Z.shape[1]

    def profile(coef: np.ndarray) -> float:
        resid = Y - Z @ coef if q else Y
        return _tau_quantile(resid, tau)

    if q == 0:
        empty = np.zeros(0)
        eta = profile(empty)
        return FitResult(
            coef=empty,
            intercept=eta,
            lam=lam,
            objective=quantile_lasso_objective(Y, Z, empty, eta, tau, lam),
        )

    Zc = center_columns(Z)
    ridge = _RidgeSolver(Zc)
    trace = float(ridge.s2.sum())
    rho1 = opts.admm_rho
    rho2 = rho1 * (trace / q if trace > 0 else 1.0)
    kappa = n * lam

    w = np.zeros(q)
    u2 = np.zeros(q)
    r = Y - _tau_quantile(Y, tau)
    u1 = np.zeros(n)

    best = w.copy()
    best_obj = quantile_lasso_objective(Y, Z, best, profile(best), tau, lam)
    converged = False
    certificate = _Certificate(opts.tol, n + q, q + 1)
    iteration = 0
    for iteration in range(1, opts.max_iter + 1):
        target = Y - r - u1
        eta = float(target.mean())
        theta = ridge.solve(rho1, rho2, rho1 * (Zc.T @ target) + rho2 * (w - u2))
        fitted = Zc @ theta + eta

        r_old = r
        r = _prox_check(Y - fitted - u1, tau, 1.0 / rho1)
        w_old = w
        w = shrinkage(theta + u2, kappa / rho2)

        res1 = fitted + r - Y
        res2 = theta - w
        u1 += res1
        u2 += res2

        obj = quantile_lasso_objective(Y, Z, w, profile(w), tau, lam)
        if obj < best_obj:
            best_obj, best = obj, w.copy()

        primal = math.sqrt(res1 @ res1 + res2 @ res2)
        delta_r = r - r_old
        dual_vec = np.append(
            rho1 * (Zc.T @ delta_r) - rho2 * (w - w_old), rho1 * delta_r.sum()
        )
        dual = float(np.linalg.norm(dual_vec))
        primal_scale = max(
            math.sqrt(fitted @ fitted + theta @ theta),
            math.sqrt((r - Y) @ (r - Y) + w @ w),
        )
        dual_scale = max(
            rho1 * float(np.linalg.norm(Zc.T @ u1)),
            rho2 * float(np.linalg.norm(u2)),
        )
        if certificate.met(best_obj, primal, dual, primal_scale, dual_scale):
            converged = True
            break

        if opts.restart:
            factor = _balance(primal, dual)
            if factor != 1.0:
                rho1 *= factor
                rho2 *= factor
                u1 /= factor
                u2 /= factor

    if not converged:
        logger.warning(
            "quantile Lasso (tau=%g) stopped after %d iterations "
            "without meeting tol=%g",
            tau,
            iteration,
            opts.tol,
        )
    eta = profile(best)
    return FitResult(
        coef=best,
        intercept=eta,
        lam=lam,
        objective=quantile_lasso_objective(Y, Z, best, eta, tau, lam),
        iterations=iteration,
        converged=converged,
    )


def _kkt_violation(grad: np.ndarray, coef: np.ndarray, lam: float) -> np.ndarray:
    return np.where(
        coef != 0,
        np.abs(grad - lam * np.sign(coef)),
        np.maximum(np.abs(grad) - lam, 0.0),
    )


def lasso_ls_fit(x, Z, lam: float, opts: Optional[SolverOptions] = None) -> FitResult:
    """Least-squares Lasso (2n)^-1 ||x - Z gamma||^2 + lam ||gamma||_1.

    Cyclic coordinate descent: after a full sweep only the active set and the
    columns violating the KKT conditions are revisited. Stops once the largest
    KKT violation is at most opts.tol.
    """
    _check_lambda(lam)
    opts = opts or SolverOptions(max_iter=10000, tol=1e-8)
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    Z = np.asfortranarray(_as_design(Z, n))
    q = Z.shape[1]
    gamma = np.zeros(q)
    if q == 0:
        return FitResult(
            coef=gamma, lam=lam, objective=lasso_objective(x, Z, gamma, lam)
        )

    resid = x.copy()
    col_sq = np.einsum("ij,ij->j", Z, Z) / n
    active = np.arange(q)
    converged = False
    sweeps = 0
    while sweeps < opts.max_iter:
        sweeps += 1
        for j in active:
            if col_sq[j] == 0:
                continue
            z = Z[:, j]
            old = gamma[j]
            new = shrinkage(z @ resid / n + col_sq[j] * old, lam) / col_sq[j]
            if new != old:
                resid -= (new - old) * z
                gamma[j] = new
        violation = _kkt_violation(Z.T @ resid / n, gamma, lam)
        if violation.max() <= opts.tol:
            converged = True
            break
        active = np.flatnonzero((gamma != 0) | (violation > opts.tol))

    if not converged:
        logger.warning(
            "Lasso stopped after %d sweeps, KKT violation %.3g > tol=%g",
            sweeps,
            violation.max(),
            opts.tol,
        )
    return FitResult(
        coef=gamma,
        lam=lam,
        objective=lasso_objective(x, Z, gamma, lam),
        iterations=sweeps,
        converged=converged,
    )


def lasso_lambda_default(
    Z, x, p: Optional[float] = None, scale: float = 1.1
) -> float:
    """scale * sd(x) * sqrt(2 log p / n); p defaults to the full column count"""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if p is None:
        p = np.asarray(Z).reshape(n, -1).shape[1] + 1
    return scale * float(np.std(x, ddof=1)) * math.sqrt(2.0 * math.log(p) / n)


def quantile_lambda_default(
    Z, tau: float, p: Optional[float] = None, scale: float = 1.1
) -> float:
    """Same sqrt(2 log p / n) rate, scaled by the spread of the quantile score"""
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[0]
    if p is None:
        p = Z.shape[1] + 1
    spread = float(np.std(Z, axis=0, ddof=1).max()) if Z.shape[1] else 0.0
    rate = math.sqrt(2.0 * math.log(p) / n)
    return scale * math.sqrt(tau * (1 - tau)) * spread * rate


def lasso_lambda_cv(
    x,
    Z,
    folds: int = 5,
    seed: Optional[Seed] = None,
    n_grid: int = 20,
    opts: Optional[SolverOptions] = None,
) -> float:
    """K-fold cross-validated penalty on a log grid from lambda_max down to 1%"""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    Z = _as_design(Z, n)
    lam_max = float(np.abs(Z.T @ x).max()) / n if Z.shape[1] else 0.0
    if lam_max == 0:
        return 0.0
    grid = np.geomspace(lam_max, 0.01 * lam_max, n_grid)
    seed = seed or Seed(value=0)
    state = int(seed.generator(CV).integers(2**32))
    splitter = KFold(n_splits=folds, shuffle=True, random_state=state)

    errors = np.zeros(n_grid)
    for train, test in splitter.split(Z):
        for g, lam in enumerate(grid):
            fit = lasso_ls_fit(x[train], Z[train], lam, opts)
            resid = x[test] - Z[test] @ fit.coef
            errors[g] += resid @ resid
    chosen = float(grid[int(np.argmin(errors))])
    logger.debug("cross-validated lambda %.4g (lambda_max %.4g)", chosen, lam_max)
    return chosen


def pivotal_lambda(
    Z,
    alpha0: float = 0.1,
    c: float = 1.1,
    B: int = 500,
    seed: Optional[Seed] = None,
    chunk: int = 2048,
) -> float:
    """c times the (1 - alpha0) quantile of ||s_n||_inf over B permutation draws.

    s_n = -2 {n(n-1)}^-1 sum_i z_i r_i with (r_1, ..., r_n) a uniform random
    permutation of 1..n. Depends on Z and the seed only.
    """
    if B < 1:
        raise SolverError(f"number of draws must be at least 1, got {B}")
    if not 0 < alpha0 < 1:
        raise SolverError(f"alpha0 must lie in (0, 1), got {alpha0}")
    Zc = center_columns(np.asarray(Z, dtype=float))
    if Zc.ndim == 1:
        Zc = Zc[:, None]
    n, q = Zc.shape
    if n < 2:
        raise SolverError("pivotal tuning needs at least 2 observations")
    if q == 0:
        return 0.0

    rng = (seed or Seed(value=0)).generator(PIVOTAL)
    base = np.arange(1, n + 1, dtype=float)
    norms = np.empty(B)
    for start in range(0, B, chunk):
        size = min(chunk, B - start)
        R = rng.permuted(np.tile(base, (size, 1)), axis=1)
        norms[start : start + size] = np.abs(R @ Zc).max(axis=1)
    norms *= 2.0 / (n * (n - 1))
    return float(c * np.quantile(norms, 1 - alpha0, method="inverted_cdf"))


def oracle_pairwise_lad(Y, Z, lam: float) -> FitResult:
    """Exact rank-Lasso minimizer by linear programming; tiny problems only.

    Variables (theta+, theta-, t) with t_ij >= |d_ij - D_ij theta| over the
    n(n-1)/2 pairs.
    """
    _check_lambda(lam)
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    Z = _as_design(Z, n)
    q = Z.shape[1]
    if n > ORACLE_MAX_N or q > ORACLE_MAX_P:
        raise SolverError(
            f"oracle limited to n <= {ORACLE_MAX_N}, p <= {ORACLE_MAX_P}; got {n}, {q}"
        )
    pairs = _Pairs(n)
    m = pairs.size
    D = Z[pairs.i] - Z[pairs.j]
    d = pairs.diff(Y)

    cost = np.concatenate([np.full(2 * q, lam), np.full(m, 2.0 / (n * (n - 1)))])
    eye = np.eye(m)
    A_ub = np.block([[-D, D, -eye], [D, -D, -eye]])
    b_ub = np.concatenate([-d, d])
    res = optimize.linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=(0, None), method="highs")
    if not res.success:
        raise SolverError(f"oracle LP failed: {res.message}")

    coef = res.x[:q] - res.x[q : 2 * q]
    return FitResult(
        coef=coef,
        lam=lam,
        objective=rank_lasso_objective(Y, Z, coef, lam),
        iterations=int(getattr(res, "nit", 0)),
        converged=True,
    )
