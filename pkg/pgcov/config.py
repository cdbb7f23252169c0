import os
from dataclasses import dataclass, replace

from dotenv import load_dotenv
from models import SolverOptions

# Load environment variables from .env file
load_dotenv()


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class Config:
    """Configuration settings for partial covariance inference"""

    # Pivotal tuning for the rank-Lasso penalty
    PIVOTAL_C: float = float(os.getenv("PIVOTAL_C", "1.1"))
    PIVOTAL_ALPHA0: float = float(os.getenv("PIVOTAL_ALPHA0", "0.1"))
    PIVOTAL_DRAWS: int = int(os.getenv("PIVOTAL_DRAWS", "500"))

    # Least-squares Lasso penalty (node-wise fits of the target column)
    LASSO_LAMBDA_SCALE: float = float(os.getenv("LASSO_LAMBDA_SCALE", "1.1"))
    CV_FOLDS: int = int(os.getenv("CV_FOLDS", "5"))
    LASSO_MAX_ITER: int = int(os.getenv("LASSO_MAX_ITER", "10000"))
    LASSO_TOL: float = float(os.getenv("LASSO_TOL", "1e-8"))

    # ADMM settings shared by the rank and quantile solvers
    ADMM_MAX_ITER: int = int(os.getenv("ADMM_MAX_ITER", "5000"))
    ADMM_TOL: float = float(os.getenv("ADMM_TOL", "1e-6"))
    ADMM_RHO: float = float(os.getenv("ADMM_RHO", "1.0"))
    ADMM_RESTART: bool = _env_bool("ADMM_RESTART", "true")  # residual balancing

    # Test settings
    QUANTILE_TAU: float = float(os.getenv("QUANTILE_TAU", "0.5"))
    ALPHA: float = float(os.getenv("ALPHA", "0.05"))

    # Simulation defaults (desk profile)
    STUDY_REPS: int = int(os.getenv("STUDY_REPS", "500"))
    STUDY_N: int = int(os.getenv("STUDY_N", "200"))
    STUDY_P: int = int(os.getenv("STUDY_P", "100"))
    AR_RHO: float = float(os.getenv("AR_RHO", "0.5"))
    MAX_FAILURE_RATE: float = float(os.getenv("MAX_FAILURE_RATE", "0.02"))

    # Output and runtime
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "./reports")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "WARNING")
    THREADS: int = int(os.getenv("THREADS", "0"))  # 0 = all logical cores
    REPORT_FORMAT_VERSION: str = "1.0"

    def profile(self, name: str) -> "Config":
        """Return a copy adjusted to a named study scale"""
        if name == "desk":
            return replace(self)
        if name == "paper":
            return replace(self, STUDY_N=200, STUDY_P=2000)
        raise ValueError(f"Unknown profile '{name}' (expected 'desk' or 'paper')")

    def threads(self) -> int:
        return self.THREADS if self.THREADS > 0 else (os.cpu_count() or 1)

    def solver_options(self) -> SolverOptions:
        """SolverOptions for the ADMM solvers"""
        return SolverOptions(
            max_iter=self.ADMM_MAX_ITER,
            tol=self.ADMM_TOL,
            admm_rho=self.ADMM_RHO,
            restart=self.ADMM_RESTART,
        )

    def lasso_options(self) -> SolverOptions:
        """SolverOptions for coordinate-descent Lasso fits"""
        return SolverOptions(max_iter=self.LASSO_MAX_ITER, tol=self.LASSO_TOL)


config = Config()
