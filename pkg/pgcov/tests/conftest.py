import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# Add the pgcov directory to the Python path
pgcov_dir = Path(__file__).parent.parent
sys.path.insert(0, str(pgcov_dir))

# Import after path modification
from config import Config  # noqa: E402
from datamodel import (  # noqa: E402
    Dataset,
    Seed,
    generate_ar1_gaussian,
    sample_error,
    save_csv,
)
from inference import InferenceEngine  # noqa: E402


def make_dataset(n, p, beta, error="normal", seed=7, rho=0.5) -> Dataset:
    """AR(1) design with Y = X beta + eps, beta zero-padded to p"""
    s = Seed(value=seed)
    X = generate_ar1_gaussian(n, p, rho, s)
    b = np.zeros(p)
    b[: len(beta)] = beta
    return Dataset(y=X @ b + sample_error(error, n, s), X=X)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing"""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


@pytest.fixture
def test_config(temp_dir):
    """Create a test configuration with small, fast settings"""
    return replace(
        Config(),
        PIVOTAL_DRAWS=200,
        ADMM_MAX_ITER=3000,
        STUDY_REPS=4,
        STUDY_N=40,
        STUDY_P=8,
        THREADS=1,
        OUTPUT_DIR=str(temp_dir / "reports"),
    )


@pytest.fixture
def small_dataset():
    """n=60, p=12 with two active predictors and Normal errors"""
    return make_dataset(60, 12, [1.0, 1.0])


@pytest.fixture
def heavy_tailed_csv(temp_dir):
    """CSV with a Cauchy-error response in column 'y'"""
    path = temp_dir / "heavy.csv"
    save_csv(make_dataset(200, 8, [1.0, 0.0, 1.0], error="cauchy", seed=11), path)
    return path


@pytest.fixture
def engine(test_config):
    """Inference engine on the test configuration"""
    return InferenceEngine(test_config)


@pytest.fixture
def dataset_factory():
    """Build simulated data sets: factory(n, p, beta, error=..., seed=...)"""
    return make_dataset
